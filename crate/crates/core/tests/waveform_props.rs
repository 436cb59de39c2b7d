use std::f64::consts::PI;

use isac_core::waveform::*;
use isac_core::{Complex64, Vec3};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const K: usize = 64;

/// Explicit centred DFT sum `(1/K) Σ_k e^{j2π(k-(K-1)/2)ν/K}`.
fn kernel_by_sum(nu: f64, k: usize) -> Complex64 {
    let kf = k as f64;
    (0..k)
        .map(|i| Complex64::from_polar(1.0, 2.0 * PI * (i as f64 - (kf - 1.0) / 2.0) * nu / kf))
        .sum::<Complex64>()
        / kf
}

fn radio() -> RadioConfig {
    RadioConfig::default()
}

proptest! {
    #[test]
    fn dirichlet_bounded_even_and_matches_sum(nu in -300.0f64..300.0) {
        let s = dirichlet_kernel(nu, K);
        prop_assert!(s.abs() <= 1.0 + 1e-12);
        prop_assert!((s - dirichlet_kernel(-nu, K)).abs() < 1e-12);
        let oracle = kernel_by_sum(nu, K);
        prop_assert!((s - oracle.re).abs() < 1e-10, "S={s} sum={oracle}");
        prop_assert!(oracle.im.abs() < 1e-10);
        // K even: shifting by one period flips the sign
        prop_assert!((dirichlet_kernel(nu + K as f64, K) + s).abs() < 1e-9);
    }

    #[test]
    fn dirichlet_integer_nulls(j in 1i64..63, periods in -3i64..3) {
        let nu = (j + periods * K as i64) as f64;
        prop_assert!(dirichlet_kernel(nu, K).abs() < 1e-12);
        let peak = dirichlet_kernel((periods * K as i64) as f64, K);
        prop_assert!((peak.abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dirichlet_continuous_at_peak(eps in 1e-12f64..1e-6) {
        prop_assert!((dirichlet_kernel(eps, K) - 1.0).abs() < 1e-9);
        prop_assert!(dirichlet_derivative(eps, K).abs() < 1e-4);
    }

    #[test]
    fn parseval(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = DMatrix::from_fn(2, K, |_, _| complex_gaussian(1.0, &mut rng));
        let z = range_compress(&y);
        for n in 0..2 {
            let ez: f64 = z.row(n).iter().map(|v| v.norm_sqr()).sum();
            let ey: f64 = y.row(n).iter().map(|v| v.norm_sqr()).sum();
            prop_assert!((ez - ey / K as f64).abs() < 1e-12 * ey);
        }
    }

    #[test]
    fn synthesis_is_additive(
        seed in any::<u64>(),
        a in (-0.3f64..0.3, 0.1f64..0.5, -0.1f64..0.1),
        b in (-0.3f64..0.3, 0.1f64..0.5, -0.1f64..0.1),
        phase in 0.0f64..std::f64::consts::TAU,
    ) {
        let cfg = radio();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sa = Scatterer::new(Vec3::new(a.0, a.1, a.2), 0.01);
        let sb = Scatterer::new(Vec3::new(b.0, b.1, b.2), 0.02).with_phase(phase);
        let array = ArrayGeometry::planar_2x2(cfg.wavelength() / 2.0);
        let centre = Vec3::new(0.01, 0.0, 0.0);
        let symbols = qpsk_symbols(K, &mut rng);
        let only_a = synthesize_received(&Scene::new(vec![sa], 0.0), &array, &centre, &symbols, &cfg, &mut rng).unwrap();
        let only_b = synthesize_received(&Scene::new(vec![sb], 0.0), &array, &centre, &symbols, &cfg, &mut rng).unwrap();
        let both = synthesize_received(&Scene::new(vec![sa, sb], 0.0), &array, &centre, &symbols, &cfg, &mut rng).unwrap();
        let scale = both.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let err = (both - only_a - only_b).iter().map(|v| v.norm()).fold(0.0, f64::max);
        prop_assert!(err <= 1e-12 * scale);
    }

    #[test]
    fn on_grid_round_trip_and_carrier_phase(bin in 4usize..60, theta in 0.0f64..std::f64::consts::TAU, seed in any::<u64>()) {
        let cfg = radio();
        let r = bin as f64 / cfg.bins_per_metre();
        let scat = Scatterer::new(Vec3::new(0.0, r, 0.0), 0.01).with_phase(theta);
        let scene = Scene::new(vec![scat], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let symbols = qpsk_symbols(K, &mut rng);
        let array = ArrayGeometry::single();
        let y = synthesize_received(&scene, &array, &Vec3::zeros(), &symbols, &cfg, &mut rng).unwrap();
        let z = range_compress(&equalize_and_cancel(&y, &symbols, Complex64::new(0.0, 0.0)).unwrap());
        // analytic compressed form (α/r²) e^{-jκr} S(ℓ − ν), written out here
        let lambda = 299_792_458.0 / cfg.carrier_hz;
        let mag = (lambda * lambda * 0.01 / (4.0 * PI).powi(3)).sqrt();
        let gain = Complex64::from_polar(mag / (r * r), theta - 4.0 * PI * r / lambda);
        let nu = 2.0 * r * cfg.bandwidth_hz / 299_792_458.0;
        let norm = gain.norm();
        for l in 0..K {
            let expect = gain * kernel_by_sum(l as f64 - nu, K).re;
            prop_assert!((z[(0, l)] - expect).norm() <= 1e-9 * norm, "bin {l}");
        }
        let d = (z[(0, bin)].arg() - (theta - cfg.wavenumber() * r)).rem_euclid(2.0 * PI);
        prop_assert!(d.min(2.0 * PI - d) < 1e-6);
    }
}

#[test]
fn noise_bins_have_variance_sigma2_over_k() {
    let cfg = radio();
    let sigma2 = 3.7e-4;
    let scene = Scene::new(Vec::new(), sigma2);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let array = ArrayGeometry::planar_2x2(cfg.wavelength() / 2.0);
    let traj = vec![Vec3::zeros(); 500];
    let cube = synthesize_cube(
        &scene,
        &array,
        &traj,
        &cfg,
        SelfInterferenceMode::Oracle,
        &mut rng,
    )
    .unwrap();
    let n = cube.values().len();
    assert!(n >= 100_000);
    let var = cube.values().iter().map(|v| v.norm_sqr()).sum::<f64>() / n as f64;
    let expect = sigma2 / K as f64;
    assert!((var / expect - 1.0).abs() < 0.05, "{var} vs {expect}");
}
