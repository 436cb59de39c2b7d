use std::f64::consts::PI;

use isac_core::exposure::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn policy() -> MpePolicy {
    MpePolicy::default()
}

proptest! {
    #[test]
    fn proposed_is_monotone(
        r in 0.0f64..1.0,
        dr in 0.0f64..0.2,
        var in 0.0f64..1e-3,
        dv in 0.0f64..1e-3,
        k in 0.0f64..4.0,
        dk in 0.0f64..2.0,
    ) {
        let mut p = policy();
        p.k = k;
        let base = eirp_proposed(r, var, &p);
        prop_assert!(eirp_proposed(r + dr, var, &p) >= base);
        prop_assert!(eirp_proposed(r, var + dv, &p) <= base);
        p.k = k + dk;
        prop_assert!(eirp_proposed(r, var, &p) <= base);
    }

    #[test]
    fn never_above_ceiling(r in 0.0f64..10.0, var in 0.0f64..1e-2, max_dbm in 20.0f64..45.0) {
        let mut p = policy();
        p.eirp_max = dbm_to_watts(max_dbm);
        prop_assert!(eirp_proposed(r, var, &p) <= p.eirp_max);
    }

    #[test]
    fn proposed_beats_formula_baseline_beyond_rs(r in 0.0f64..0.6, var in 0.0f64..1e-3) {
        let mut p = policy();
        p.eirp_base_override = None;
        let r_eff = effective_distance(r, var, p.k);
        if r_eff >= p.r_s {
            prop_assert!(eirp_proposed(r, var, &p) >= 4.0 * PI * p.s_lim * p.r_s * p.r_s * (1.0 - 1e-12));
        }
    }

    #[test]
    fn compliant_whenever_covered(r_true in 0.03f64..0.6, sigma in 1e-4f64..2e-2, seed in any::<u64>()) {
        let p = policy();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        for _ in 0..200 {
            let r_hat = r_true + noise.sample(&mut rng);
            if r_true >= effective_distance(r_hat, sigma * sigma, p.k) {
                prop_assert!(eirp_proposed(r_hat, sigma * sigma, &p) <= eirp_mpe_limit(r_true, p.s_lim).unwrap() * (1.0 + 1e-12));
            }
        }
    }
}

#[test]
fn coverage_is_near_one_sided_quantile() {
    let p = policy();
    let sigma = 4e-3;
    let r_true = 0.2;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let noise = Normal::new(0.0, sigma).unwrap();
    let draws = 10_000;
    let covered = (0..draws)
        .filter(|_| {
            r_true >= effective_distance(r_true + noise.sample(&mut rng), sigma * sigma, p.k)
        })
        .count();
    let rate = covered as f64 / draws as f64;
    // Φ(2.58) = 0.99506; six binomial standard deviations either side
    let sd = (0.99506f64 * (1.0 - 0.99506) / draws as f64).sqrt();
    assert!((rate - 0.99506).abs() < 6.0 * sd, "coverage {rate}");
}
