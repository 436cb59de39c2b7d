//! Phase-centre trajectories, IMU drift and the correlated error prior.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::waveform::RadioConfig;
use crate::{Error, Result, Vec3};

/// Slow-time sample count `⌈4A/λ⌉` for an aperture of length `A`.
pub fn aperture_samples(aperture: f64, cfg: &RadioConfig) -> usize {
    let x = 4.0 * aperture / cfg.wavelength();
    // tolerate representation error when 4A/λ is an exact integer
    (x - 1e-9).ceil().max(0.0) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TrajectoryKind {
    /// Straight sweep along x, centred on the origin.
    LinearSweep,
    /// Circular arc of the given radius in the x–z plane.
    Arc { radius: f64 },
    /// Sweep along x with a sinusoidal z-wobble. `relative_amplitude` is
    /// the wobble amplitude as a fraction of the aperture length.
    Sinusoidal {
        relative_amplitude: f64,
        cycles: f64,
    },
}

impl Default for TrajectoryKind {
    fn default() -> Self {
        TrajectoryKind::Sinusoidal {
            relative_amplitude: 0.2,
            cycles: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub positions: Vec<Vec3>,
    /// Slow-time sampling interval T (s).
    pub interval: f64,
    /// Aperture length A (m).
    pub aperture: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        self.positions.iter().sum::<Vec3>() / self.positions.len().max(1) as f64
    }

    pub fn translated(&self, offset: &Vec3) -> Trajectory {
        Trajectory {
            positions: self.positions.iter().map(|p| p + offset).collect(),
            ..self.clone()
        }
    }
}

/// Uniform arc-length samples along one of the canonical hand motions.
///
/// The `M = ⌈4A/λ⌉` samples sit at the centres of `M` equal cells of the
/// path, so adjacent samples are `A/M ≤ λ/4` apart along the curve.
pub fn generate_trajectory(
    kind: TrajectoryKind,
    aperture: f64,
    cfg: &RadioConfig,
    interval: f64,
) -> Result<Trajectory> {
    if !(aperture > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "aperture length must be positive, got {aperture}"
        )));
    }
    if !(interval > 0.0) {
        return Err(Error::InvalidParameter(
            "sampling interval must be positive".into(),
        ));
    }
    let m = aperture_samples(aperture, cfg);
    if m < 2 {
        return Err(Error::DegenerateAperture { samples: m });
    }
    let step = aperture / m as f64;
    let arc: Vec<f64> = (0..m).map(|i| (i as f64 + 0.5) * step).collect();
    let positions = match kind {
        TrajectoryKind::LinearSweep => arc
            .iter()
            .map(|s| Vec3::new(s - 0.5 * aperture, 0.0, 0.0))
            .collect(),
        TrajectoryKind::Arc { radius } => {
            if !(radius > 0.0) {
                return Err(Error::InvalidParameter(
                    "arc radius must be positive".into(),
                ));
            }
            arc.iter()
                .map(|s| {
                    let phi = (s - 0.5 * aperture) / radius;
                    Vec3::new(radius * phi.sin(), 0.0, radius * (phi.cos() - 1.0))
                })
                .collect()
        }
        TrajectoryKind::Sinusoidal {
            relative_amplitude,
            cycles,
        } => sinusoidal_samples(aperture, relative_amplitude * aperture, cycles, &arc)?,
    };
    Ok(Trajectory {
        positions,
        interval,
        aperture,
    })
}

fn sinusoidal_samples(aperture: f64, amp: f64, cycles: f64, arc: &[f64]) -> Result<Vec<Vec3>> {
    if amp < 0.0 || cycles < 0.0 {
        return Err(Error::InvalidParameter(
            "wobble amplitude and cycles must be >= 0".into(),
        ));
    }
    const DENSE: usize = 20_000;
    let curve =
        |span: f64, t: f64| Vec3::new(span * (t - 0.5), 0.0, amp * (2.0 * PI * cycles * t).sin());
    let cumulative = |span: f64| {
        let mut acc = vec![0.0; DENSE + 1];
        let mut prev = curve(span, 0.0);
        for i in 1..=DENSE {
            let p = curve(span, i as f64 / DENSE as f64);
            acc[i] = acc[i - 1] + (p - prev).norm();
            prev = p;
        }
        acc
    };
    // x-span such that the total path length equals the aperture
    let (mut lo, mut hi) = (0.0, aperture);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if cumulative(mid)[DENSE] < aperture {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let span = 0.5 * (lo + hi);
    let acc = cumulative(span);
    let total = acc[DENSE];
    Ok(arc
        .iter()
        .map(|&s| {
            let target = s * total / aperture;
            let i = acc.partition_point(|&a| a < target).clamp(1, DENSE);
            let frac = (target - acc[i - 1]) / (acc[i] - acc[i - 1]).max(f64::MIN_POSITIVE);
            let t = (i as f64 - 1.0 + frac) / DENSE as f64;
            curve(span, t)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSpec {
    /// Accelerometer white-noise std σ_a (m/s² per sample).
    pub accel_noise: f64,
    /// Accelerometer bias std σ_b (m/s²).
    pub bias_std: f64,
    /// Sampling interval T (s).
    pub interval: f64,
}

impl ImuSpec {
    pub fn consumer(interval: f64) -> Self {
        Self {
            accel_noise: 5e-2,
            bias_std: 2e-2,
            interval,
        }
    }

    pub fn high_grade(interval: f64) -> Self {
        Self {
            accel_noise: 5e-3,
            bias_std: 1e-3,
            interval,
        }
    }

    pub fn perfect(interval: f64) -> Self {
        Self {
            accel_noise: 0.0,
            bias_std: 0.0,
            interval,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.accel_noise < 0.0 || self.bias_std < 0.0 || !(self.interval > 0.0) {
            return Err(Error::InvalidParameter(
                "IMU noise/bias must be >= 0 and interval > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Discrete double integration rule used by the IMU mechanisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntegrationScheme {
    /// `v⁺ = v + T·a`, `q⁺ = q + T·v⁺`; matches the closed-form error covariance.
    #[default]
    Rectangle,
    /// `v⁺ = v + T·a`, `q⁺ = q + T·(v + v⁺)/2`.
    Trapezoidal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImuRun {
    /// IMU-integrated positions q̂_m.
    pub estimate: Vec<Vec3>,
    /// δ_m = q̂_m − q_m, with δ_0 = 0.
    pub errors: Vec<Vec3>,
    /// Drawn accelerometer bias.
    pub bias: Vec3,
}

fn gaussian3<R: Rng + ?Sized>(std: f64, rng: &mut R) -> Vec3 {
    Vec3::new(
        std * rng.sample::<f64, _>(StandardNormal),
        std * rng.sample::<f64, _>(StandardNormal),
        std * rng.sample::<f64, _>(StandardNormal),
    )
}

/// Corrupt the true accelerations with bias and white noise and integrate
/// them twice, starting from the true position and velocity.
pub fn simulate_imu<R: Rng + ?Sized>(
    traj: &Trajectory,
    spec: &ImuSpec,
    scheme: IntegrationScheme,
    rng: &mut R,
) -> Result<ImuRun> {
    spec.validate()?;
    let q = &traj.positions;
    let m_count = q.len();
    if m_count < 2 {
        return Err(Error::DegenerateAperture { samples: m_count });
    }
    let t = spec.interval;
    // true velocities/accelerations consistent with the chosen scheme
    let mut vel = vec![Vec3::zeros(); m_count];
    match scheme {
        IntegrationScheme::Rectangle => {
            for m in 1..m_count {
                vel[m] = (q[m] - q[m - 1]) / t;
            }
            vel[0] = vel[1];
        }
        IntegrationScheme::Trapezoidal => {
            vel[0] = (q[1] - q[0]) / t;
            for m in 1..m_count {
                vel[m] = 2.0 * (q[m] - q[m - 1]) / t - vel[m - 1];
            }
        }
    }
    let accel: Vec<Vec3> = (0..m_count - 1)
        .map(|m| (vel[m + 1] - vel[m]) / t)
        .collect();

    let bias = gaussian3(spec.bias_std, rng);
    let mut estimate = Vec::with_capacity(m_count);
    let mut pos = q[0];
    let mut v = vel[0];
    estimate.push(pos);
    for a in &accel {
        let measured = a + bias + gaussian3(spec.accel_noise, rng);
        let v_next = v + t * measured;
        pos += match scheme {
            IntegrationScheme::Rectangle => t * v_next,
            IntegrationScheme::Trapezoidal => 0.5 * t * (v + v_next),
        };
        v = v_next;
        estimate.push(pos);
    }
    let errors = estimate.iter().zip(q).map(|(e, t)| e - t).collect();
    Ok(ImuRun {
        estimate,
        errors,
        bias,
    })
}

impl ImuRun {
    /// CSV with columns `m,qx,qy,qz,qhat_x,qhat_y,qhat_z`.
    pub fn write_csv<W: Write>(&self, truth: &Trajectory, mut w: W) -> Result<()> {
        writeln!(w, "m,qx,qy,qz,qhat_x,qhat_y,qhat_z")?;
        for (m, (q, e)) in truth.positions.iter().zip(&self.estimate).enumerate() {
            writeln!(
                w,
                "{m},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
                q.x, q.y, q.z, e.x, e.y, e.z
            )?;
        }
        Ok(())
    }
}

/// Correlated Gaussian prior `δ ~ N(0, C_t ⊗ I₃)` on the stacked errors
/// `δ_1 … δ_{M-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorPrior {
    ct: DMatrix<f64>,
    /// Generating IMU parameters, when known, enable the exact banded inverse.
    source: Option<ImuSpec>,
    scale: f64,
}

/// Temporal covariance `[C_t]_{mn}` for indices `m, n ∈ 1..M-1`.
pub fn error_covariance(spec: &ImuSpec, m_count: usize) -> Result<ErrorPrior> {
    spec.validate()?;
    if m_count < 2 {
        return Err(Error::DegenerateAperture { samples: m_count });
    }
    let dim = m_count - 1;
    let t4 = spec.interval.powi(4);
    let bias_coef = spec.bias_std * spec.bias_std * t4 / 4.0;
    let noise_coef = spec.accel_noise * spec.accel_noise * t4;
    let ct = DMatrix::from_fn(dim, dim, |i, j| {
        let (m, n) = ((i + 1) as f64, (j + 1) as f64);
        let bias = bias_coef * ((m * (m + 1.0)) * (n * (n + 1.0)));
        let noise: f64 = (1..=i.min(j) + 1)
            .map(|k| {
                let k = k as f64;
                (m - k + 1.0) * (n - k + 1.0)
            })
            .sum();
        bias + noise_coef * noise
    });
    Ok(ErrorPrior {
        ct,
        source: Some(*spec),
        scale: 1.0,
    })
}

impl ErrorPrior {
    /// Prior from an arbitrary symmetric PSD temporal covariance.
    pub fn from_matrix(ct: DMatrix<f64>) -> Result<Self> {
        if !ct.is_square() {
            return Err(Error::DimensionMismatch("C_t must be square".into()));
        }
        Ok(Self {
            ct,
            source: None,
            scale: 1.0,
        })
    }

    pub fn temporal(&self) -> &DMatrix<f64> {
        &self.ct
    }

    /// Number of error vectors, M − 1.
    pub fn dim(&self) -> usize {
        self.ct.nrows()
    }

    /// Same prior with `C_t` multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            ct: &self.ct * factor,
            source: self.source,
            scale: self.scale * factor,
        }
    }

    /// Full `C_t ⊗ I₃`; only for diagnostics and small M.
    pub fn kronecker(&self) -> DMatrix<f64> {
        crate::linalg::kron_identity3(&self.ct)
    }

    /// `C_t⁻¹`. With known generating IMU parameters and σ_a > 0 this uses the
    /// exact banded inverse of the double-integration operator plus a rank-one
    /// bias correction; otherwise a jittered Cholesky inverse.
    pub fn temporal_precision(&self) -> Result<DMatrix<f64>> {
        if let Some(spec) = self.source {
            if spec.accel_noise > 0.0 {
                return Ok(structured_precision(&spec, self.dim()) / self.scale);
            }
        }
        crate::linalg::spd_inverse_with_jitter(&self.ct, 1e12)
    }
}

fn structured_precision(spec: &ImuSpec, dim: usize) -> DMatrix<f64> {
    let t4 = spec.interval.powi(4);
    // δ_noise = T² D n with D = L², L the lower-triangular ones matrix, so
    // D⁻¹ = (L⁻¹)² is a lower-triangular second difference.
    let mut dinv = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..dim {
        dinv[(i, i)] = 1.0;
        if i >= 1 {
            dinv[(i, i - 1)] = -2.0;
        }
        if i >= 2 {
            dinv[(i, i - 2)] = 1.0;
        }
    }
    let noise_var = spec.accel_noise * spec.accel_noise * t4;
    let a_inv = dinv.transpose() * &dinv / noise_var;
    let c = spec.bias_std * spec.bias_std * t4 / 4.0;
    if c == 0.0 {
        return a_inv;
    }
    let w = DVector::from_fn(dim, |i, _| {
        let m = (i + 1) as f64;
        m * (m + 1.0)
    });
    let aw = &a_inv * &w;
    let denom = 1.0 + c * w.dot(&aw);
    a_inv - (&aw * aw.transpose()) * (c / denom)
}

/// Draw `δ ~ N(0, C_t ⊗ I₃)` as a 3(M−1) vector ordered `[δ_1x, δ_1y, δ_1z, δ_2x, …]`.
pub fn sample_errors<R: Rng + ?Sized>(prior: &ErrorPrior, rng: &mut R) -> Result<DVector<f64>> {
    let factor = crate::linalg::psd_factor(prior.temporal())?;
    let dim = prior.dim();
    let mut out = DVector::zeros(3 * dim);
    for axis in 0..3 {
        let g = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = &factor * g;
        for m in 0..dim {
            out[3 * m + axis] = x[m];
        }
    }
    Ok(out)
}

/// Symmetric eigen-decomposition check used by tests and diagnostics.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> RadioConfig {
        RadioConfig::default()
    }

    #[test]
    fn sample_count_from_aperture() {
        // 4·0.05/λ(28 GHz) = 18.68
        let t = generate_trajectory(TrajectoryKind::LinearSweep, 0.05, &cfg(), 1e-3).unwrap();
        assert_eq!(t.len(), 19);
        let lambda = cfg().wavelength();
        let err = generate_trajectory(TrajectoryKind::LinearSweep, lambda / 4.0, &cfg(), 1e-3);
        assert!(matches!(err, Err(Error::DegenerateAperture { samples: 1 })));
        assert!(generate_trajectory(TrajectoryKind::LinearSweep, 0.0, &cfg(), 1e-3).is_err());
    }

    #[test]
    fn arc_spacing_bounded_by_quarter_wavelength() {
        let t =
            generate_trajectory(TrajectoryKind::Arc { radius: 0.3 }, 0.5, &cfg(), 1e-3).unwrap();
        assert_eq!(t.len(), 187);
        let limit = cfg().wavelength() / 4.0 * (1.0 + 1e-9);
        for w in t.positions.windows(2) {
            assert!((w[1] - w[0]).norm() <= limit);
        }
    }

    #[test]
    fn sinusoidal_path_length() {
        let t = generate_trajectory(TrajectoryKind::default(), 0.05, &cfg(), 1e-3).unwrap();
        let step = 0.05 / t.len() as f64;
        let chord: f64 = t.positions.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
        // chords underestimate arc length slightly
        let arc = step * (t.len() - 1) as f64;
        assert!(chord <= arc * (1.0 + 1e-6) && chord > 0.98 * arc);
        assert!(t.positions.iter().any(|p| p.z.abs() > 1e-3));
    }

    #[test]
    fn covariance_entries() {
        let bias = ImuSpec {
            accel_noise: 0.0,
            bias_std: 1.0,
            interval: 1.0,
        };
        let p = error_covariance(&bias, 5).unwrap();
        assert_eq!(p.temporal()[(0, 0)], 1.0);
        let noise = ImuSpec {
            accel_noise: 1.0,
            bias_std: 0.0,
            interval: 1.0,
        };
        let p = error_covariance(&noise, 5).unwrap();
        // m = 2, n = 3: 2·3 + 1·2
        assert_eq!(p.temporal()[(1, 2)], 8.0);
        let p = error_covariance(&ImuSpec::perfect(1.0), 5).unwrap();
        assert!(p.temporal().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn structured_precision_is_inverse() {
        for spec in [
            ImuSpec::consumer(0.02),
            ImuSpec::high_grade(0.02),
            ImuSpec {
                accel_noise: 0.1,
                bias_std: 0.0,
                interval: 0.01,
            },
        ] {
            let prior = error_covariance(&spec, 30).unwrap();
            let prec = prior.temporal_precision().unwrap();
            let id = prior.temporal() * &prec;
            let err = (id - DMatrix::<f64>::identity(29, 29)).abs().max();
            assert!(err < 1e-6, "err {err}");
            let half = prior.scaled(0.5).temporal_precision().unwrap();
            assert!((half - prec * 2.0).abs().max() < 1e-6 * 1.0);
        }
    }

    #[test]
    fn perfect_imu_reproduces_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = generate_trajectory(TrajectoryKind::default(), 0.05, &cfg(), 0.02).unwrap();
        for scheme in [IntegrationScheme::Rectangle, IntegrationScheme::Trapezoidal] {
            let run = simulate_imu(&t, &ImuSpec::perfect(0.02), scheme, &mut rng).unwrap();
            for (e, q) in run.estimate.iter().zip(&t.positions) {
                assert!((e - q).norm() < 1e-12);
            }
            assert_eq!(run.errors[0], Vec3::zeros());
        }
    }

    #[test]
    fn constant_bias_grows_quadratically() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t =
            generate_trajectory(TrajectoryKind::Arc { radius: 0.3 }, 0.05, &cfg(), 0.02).unwrap();
        let spec = ImuSpec {
            accel_noise: 0.0,
            bias_std: 0.05,
            interval: 0.02,
        };
        let run = simulate_imu(&t, &spec, IntegrationScheme::Rectangle, &mut rng).unwrap();
        for (m, d) in run.errors.iter().enumerate() {
            let mf = m as f64;
            let expect = run.bias * (0.02 * 0.02 / 2.0 * mf * (mf + 1.0));
            assert!((d - expect).norm() < 1e-9 * expect.norm().max(1e-12) + 1e-15);
        }
    }

    #[test]
    fn degenerate_prior_samples_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let prior = error_covariance(&ImuSpec::perfect(0.01), 6).unwrap();
        let d = sample_errors(&prior, &mut rng).unwrap();
        assert_eq!(d.len(), 15);
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_psd_prior_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let bad =
            ErrorPrior::from_matrix(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).unwrap();
        assert!(matches!(
            sample_errors(&bad, &mut rng),
            Err(Error::NotPositiveSemidefinite(_))
        ));
    }

    #[test]
    fn csv_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let t = generate_trajectory(TrajectoryKind::LinearSweep, 0.01, &cfg(), 0.02).unwrap();
        let run = simulate_imu(
            &t,
            &ImuSpec::consumer(0.02),
            IntegrationScheme::Rectangle,
            &mut rng,
        )
        .unwrap();
        let mut buf = Vec::new();
        run.write_csv(&t, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "m,qx,qy,qz,qhat_x,qhat_y,qhat_z");
        assert_eq!(lines.len(), t.len() + 1);
        assert_eq!(lines[1].split(',').count(), 7);
    }
}
