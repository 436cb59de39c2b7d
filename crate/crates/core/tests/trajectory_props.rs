use isac_core::trajectory::*;
use isac_core::Vec3;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec(a: f64, b: f64, t: f64) -> ImuSpec {
    ImuSpec {
        accel_noise: a,
        bias_std: b,
        interval: t,
    }
}

/// Covariance of δ_m from first principles: with the rectangle rule,
/// δ_m = T² Σ_{i<m} (m−i) e_i where e_i = b + n_i.
fn brute_covariance(s: &ImuSpec, m_count: usize) -> DMatrix<f64> {
    let t4 = s.interval.powi(4);
    DMatrix::from_fn(m_count - 1, m_count - 1, |i, j| {
        let (m, n) = (i + 1, j + 1);
        let wm: Vec<f64> = (0..m).map(|k| (m - k) as f64).collect();
        let wn: Vec<f64> = (0..n).map(|k| (n - k) as f64).collect();
        let bias = wm.iter().sum::<f64>() * wn.iter().sum::<f64>() * s.bias_std.powi(2);
        let noise: f64 = (0..m.min(n)).map(|k| wm[k] * wn[k]).sum::<f64>() * s.accel_noise.powi(2);
        t4 * (bias + noise)
    })
}

proptest! {
    #[test]
    fn closed_form_matches_weighted_sums(a in 0.0f64..0.1, b in 0.0f64..0.05, t in 1e-3f64..0.05, m in 2usize..40) {
        let s = spec(a, b, t);
        let ct = error_covariance(&s, m).unwrap();
        let oracle = brute_covariance(&s, m);
        let scale = oracle.abs().max().max(f64::MIN_POSITIVE);
        prop_assert!((ct.temporal() - &oracle).abs().max() <= 1e-12 * scale);
    }

    #[test]
    fn symmetric_with_nondecreasing_diagonal(a in 0.0f64..0.1, b in 0.0f64..0.05, t in 1e-3f64..0.05, m in 2usize..60) {
        let ct = error_covariance(&spec(a, b, t), m).unwrap();
        let c = ct.temporal();
        prop_assert_eq!(c, &c.transpose());
        for i in 1..c.nrows() {
            prop_assert!(c[(i, i)] >= c[(i - 1, i - 1)]);
        }
    }

    #[test]
    fn first_error_is_zero(seed in any::<u64>(), m in 2usize..30) {
        let truth = Trajectory {
            positions: (0..m).map(|i| Vec3::new(0.002 * i as f64, 0.0, 0.0)).collect(),
            interval: 0.02,
            aperture: 0.002 * m as f64,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for scheme in [IntegrationScheme::Rectangle, IntegrationScheme::Trapezoidal] {
            let run = simulate_imu(&truth, &ImuSpec::consumer(0.02), scheme, &mut rng).unwrap();
            prop_assert_eq!(run.errors[0], Vec3::zeros());
        }
    }
}

#[test]
fn bias_term_dominates_with_growing_ratio() {
    let bias_only = error_covariance(&spec(0.0, 2e-2, 0.02), 200).unwrap();
    let noise_only = error_covariance(&spec(5e-2, 0.0, 0.02), 200).unwrap();
    let ratio: Vec<f64> = (0..199)
        .map(|i| bias_only.temporal()[(i, i)] / noise_only.temporal()[(i, i)])
        .collect();
    assert!(ratio.windows(2).all(|w| w[1] > w[0]));
    // bias ~ m⁴/4, noise ~ m³/3, so ratio/m tends to (3/4)(σ_b/σ_a)²
    let limit = 0.75 * (2e-2f64 / 5e-2).powi(2);
    let last = ratio[198] / 199.0;
    assert!((last / limit - 1.0).abs() < 0.02, "{last} vs {limit}");
}

fn sample_covariance(samples: &[Vec<f64>]) -> DMatrix<f64> {
    let d = samples[0].len();
    let n = samples.len() as f64;
    let mut c = DMatrix::zeros(d, d);
    for s in samples {
        for i in 0..d {
            for j in 0..d {
                c[(i, j)] += s[i] * s[j];
            }
        }
    }
    c / n
}

fn imu_error_samples(s: &ImuSpec, m: usize, runs: usize, seed: u64) -> Vec<Vec<f64>> {
    let truth = Trajectory {
        positions: (0..m)
            .map(|i| Vec3::new(0.001 * i as f64, 0.1, 0.0))
            .collect(),
        interval: s.interval,
        aperture: 0.001 * m as f64,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(3 * runs);
    for _ in 0..runs {
        let run = simulate_imu(&truth, s, IntegrationScheme::Rectangle, &mut rng).unwrap();
        for axis in 0..3 {
            out.push(run.errors[1..].iter().map(|e| e[axis]).collect());
        }
    }
    out
}

fn max_relative(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| ((x - y) / y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn sampler_and_simulator_agree_in_covariance() {
    let s = ImuSpec::consumer(0.02);
    let m = 20;
    let prior = error_covariance(&s, m).unwrap();
    let sim = sample_covariance(&imu_error_samples(&s, m, 10_000, 5));
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let drawn: Vec<Vec<f64>> = (0..10_000)
        .flat_map(|_| {
            let d = sample_errors(&prior, &mut rng).unwrap();
            (0..3)
                .map(move |axis| (0..m - 1).map(|i| d[3 * i + axis]).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        })
        .collect();
    let smp = sample_covariance(&drawn);
    let rel = max_relative(&sim, &smp);
    assert!(rel < 0.05, "max relative gap {rel}");
}
