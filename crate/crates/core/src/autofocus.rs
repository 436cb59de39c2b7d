//! EKF autofocus: track the trajectory error from differential carrier
//! phases of calibration scatterers and correct the IMU trajectory.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::imaging::{
    detect_points, refine_points, ImageGrid, JointSettings, PointEstimate, PointModel,
    ProfileSpectra, RefineSettings,
};
use crate::trajectory::{error_covariance, ImuSpec, IntegrationScheme};
use crate::waveform::{dirichlet_kernel, ArrayGeometry, RadioConfig, RangeCube};
use crate::{Complex64, Error, Result, Vec3};

pub type State9 = SVector<f64, 9>;
pub type Cov9 = SMatrix<f64, 9, 9>;

/// Wrap an angle to `(−π, π]`.
pub fn wrap_phase(x: f64) -> f64 {
    let mut y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    }
    y
}

/// Filter state `ξ = [δ, v, b]` (position error, velocity error, accelerometer bias).
#[derive(Debug, Clone, PartialEq)]
pub struct EkfState {
    pub xi: State9,
    pub cov: Cov9,
}

impl EkfState {
    /// State at the first acquisition: zero error, known velocity, bias
    /// drawn from its prior.
    pub fn initial(spec: &ImuSpec) -> Self {
        let mut cov = Cov9::zeros();
        let vb = spec.bias_std * spec.bias_std;
        for i in 6..9 {
            cov[(i, i)] = vb;
        }
        Self {
            xi: State9::zeros(),
            cov,
        }
    }

    pub fn delta(&self) -> Vec3 {
        Vec3::new(self.xi[0], self.xi[1], self.xi[2])
    }

    pub fn delta_variance(&self) -> Vec3 {
        Vec3::new(self.cov[(0, 0)], self.cov[(1, 1)], self.cov[(2, 2)])
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.cov.symmetric_eigenvalues().min()
    }
}

/// Transition matrix and process noise for one step of the double integrator.
pub fn transition(spec: &ImuSpec, scheme: IntegrationScheme) -> (Cov9, Cov9) {
    let t = spec.interval;
    let (fdb, fdv_noise) = match scheme {
        IntegrationScheme::Rectangle => (t * t, t * t),
        IntegrationScheme::Trapezoidal => (0.5 * t * t, 0.5 * t * t),
    };
    let mut f = Cov9::identity();
    let mut q = Cov9::zeros();
    let s2 = spec.accel_noise * spec.accel_noise;
    // noise enters δ with gain `fdv_noise` and v with gain T
    let g = [fdv_noise, t];
    for a in 0..3 {
        f[(a, 3 + a)] = t;
        f[(a, 6 + a)] = fdb;
        f[(3 + a, 6 + a)] = t;
        for i in 0..2 {
            for j in 0..2 {
                q[(3 * i + a, 3 * j + a)] = s2 * g[i] * g[j];
            }
        }
    }
    (f, q)
}

/// `ξ⁺ = Fξ`, `P⁺ = FPFᵀ + Q`.
pub fn predict(state: &EkfState, spec: &ImuSpec, scheme: IntegrationScheme) -> EkfState {
    let (f, q) = transition(spec, scheme);
    let mut cov = f * state.cov * f.transpose() + q;
    cov = 0.5 * (cov + cov.transpose());
    EkfState {
        xi: f * state.xi,
        cov,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedFilterOutput {
    pub amplitude: Complex64,
    pub phase: f64,
    pub valid: bool,
}

/// `α = Σ_ℓ z[ℓ] S(ℓ − ν̂)` over every bin, valid when `|α|` exceeds
/// `threshold · noise_std`.
pub fn matched_filter_phase(
    z: &[Complex64],
    nu: f64,
    noise_std: f64,
    threshold: f64,
) -> MatchedFilterOutput {
    let k = z.len();
    let amplitude: Complex64 = if nu >= 0.0 && nu < k as f64 {
        z.iter()
            .enumerate()
            .map(|(l, v)| v * dirichlet_kernel(l as f64 - nu, k))
            .sum()
    } else {
        Complex64::new(0.0, 0.0)
    };
    let mag = amplitude.norm();
    MatchedFilterOutput {
        amplitude,
        phase: amplitude.arg(),
        valid: mag > 0.0 && mag > threshold * noise_std,
    }
}

/// Differential phases `ψ = wrap(φ_m − φ_0)` for the `(n, q)` pairs of one
/// acquisition, stored n-major, with per-entry noise std.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseObservation {
    pub psi: Vec<f64>,
    pub valid: Vec<bool>,
    pub sigma: Vec<f64>,
}

impl PhaseObservation {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

pub fn differential_phases(
    current: &[MatchedFilterOutput],
    reference: &[MatchedFilterOutput],
    sigma: &[f64],
) -> Result<PhaseObservation> {
    if current.len() != reference.len() || current.len() != sigma.len() {
        return Err(Error::DimensionMismatch(
            "phase sets differ in length".into(),
        ));
    }
    Ok(PhaseObservation {
        psi: current
            .iter()
            .zip(reference)
            .map(|(c, r)| wrap_phase(c.phase - r.phase))
            .collect(),
        valid: current
            .iter()
            .zip(reference)
            .map(|(c, r)| c.valid && r.valid)
            .collect(),
        sigma: sigma.to_vec(),
    })
}

/// Geometry fixed for the whole filter run.
#[derive(Debug, Clone)]
pub struct ObservationGeometry<'a> {
    pub calib: &'a [Vec3],
    pub array: &'a ArrayGeometry,
    pub cfg: &'a RadioConfig,
    /// `r̂_{n,q,0}` stored n-major.
    pub reference_ranges: Vec<f64>,
}

impl<'a> ObservationGeometry<'a> {
    pub fn new(
        calib: &'a [Vec3],
        array: &'a ArrayGeometry,
        cfg: &'a RadioConfig,
        q0: &Vec3,
    ) -> Self {
        let mut reference_ranges = Vec::with_capacity(array.len() * calib.len());
        for n in 0..array.len() {
            let e = array.element_position(q0, n);
            for c in calib {
                reference_ranges.push((c - e).norm());
            }
        }
        Self {
            calib,
            array,
            cfg,
            reference_ranges,
        }
    }

    /// `g(δ) = −κ(‖c − (q̂ − δ + d)‖ − r̂_0)` and its Jacobian rows with respect to δ.
    pub fn predict_phases(&self, q_hat: &Vec3, delta: &Vec3) -> (Vec<f64>, Vec<Vec3>) {
        let kappa = self.cfg.wavenumber();
        let mut g = Vec::with_capacity(self.reference_ranges.len());
        let mut h = Vec::with_capacity(self.reference_ranges.len());
        let centre = q_hat - delta;
        for n in 0..self.array.len() {
            let e = self.array.element_position(&centre, n);
            for (q, c) in self.calib.iter().enumerate() {
                let w = c - e;
                let r = w.norm();
                g.push(-kappa * (r - self.reference_ranges[n * self.calib.len() + q]));
                // ∂r/∂δ = w/r: moving the true element back by δ lengthens the path along w
                h.push(-kappa * w / r);
            }
        }
        (g, h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateOutcome {
    pub state: EkfState,
    /// RMS of the wrapped innovations actually used.
    pub innovation_rms: f64,
    pub used: usize,
    /// Set when every entry was invalid and the prediction was returned.
    pub skipped: bool,
}

/// Gain-weighted correction `K ν` and Joseph-form posterior covariance.
fn joseph_update(
    pmat: &DMatrix<f64>,
    h: &DMatrix<f64>,
    innov: &DVector<f64>,
    r: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let pht = pmat * h.transpose();
    let mut s = h * &pht + r;
    s = 0.5 * (&s + s.transpose());
    let s_inv = crate::linalg::spd_inverse(&s)
        .or_else(|| s.clone().try_inverse())
        .ok_or(Error::SingularBlock {
            block: "innovation",
        })?;
    let gain = &pht * s_inv;
    let ikh = DMatrix::<f64>::identity(pmat.nrows(), pmat.ncols()) - &gain * h;
    let cov = &ikh * pmat * ikh.transpose() + &gain * r * gain.transpose();
    Ok((&gain * innov, 0.5 * (&cov + cov.transpose())))
}

/// Joseph-form EKF update with wrapped innovations; invalid rows are dropped.
pub fn update(
    state: &EkfState,
    obs: &PhaseObservation,
    geom: &ObservationGeometry,
    q_hat: &Vec3,
) -> Result<UpdateOutcome> {
    if obs.psi.len() != geom.reference_ranges.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} phases for {} (element, point) pairs",
            obs.psi.len(),
            geom.reference_ranges.len()
        )));
    }
    let rows: Vec<usize> = (0..obs.psi.len()).filter(|&i| obs.valid[i]).collect();
    if rows.is_empty() {
        return Ok(UpdateOutcome {
            state: state.clone(),
            innovation_rms: 0.0,
            used: 0,
            skipped: true,
        });
    }
    let (g, jac) = geom.predict_phases(q_hat, &state.delta());
    let p = rows.len();
    let mut h = DMatrix::<f64>::zeros(p, 9);
    let mut innov = DVector::<f64>::zeros(p);
    let mut r = DMatrix::<f64>::zeros(p, p);
    for (row, &i) in rows.iter().enumerate() {
        for a in 0..3 {
            h[(row, a)] = jac[i][a];
        }
        innov[row] = wrap_phase(obs.psi[i] - g[i]);
        r[(row, row)] = obs.sigma[i] * obs.sigma[i];
    }
    let pmat = DMatrix::from_fn(9, 9, |i, j| state.cov[(i, j)]);
    let (dx, joseph) = joseph_update(&pmat, &h, &innov, &r)?;
    let xi = state.xi + State9::from_iterator(dx.iter().cloned());
    let mut cov = Cov9::from_fn(|i, j| joseph[(i, j)]);
    cov = 0.5 * (cov + cov.transpose());
    let innovation_rms = (innov.norm_squared() / p as f64).sqrt();
    Ok(UpdateOutcome {
        state: EkfState { xi, cov },
        innovation_rms,
        used: p,
        skipped: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutofocusOptions {
    /// Acquisitions in the provisional image; `None` picks `max(8, ⌈M/10⌉)`.
    pub provisional_samples: Option<usize>,
    /// Number of calibration points Q.
    pub calibration_points: usize,
    /// Interpolation taps for the provisional image.
    pub window: usize,
    /// Alternating refinement passes of the joint calibration fit.
    pub sweeps: usize,
    /// EKF passes; later passes re-fit the calibration over the full aperture.
    pub passes: usize,
    /// Remove the other calibration echoes before each matched filter.
    pub cancel_interference: bool,
    /// Prior std of each calibration coordinate in the MAP refinement (m).
    pub calibration_std: f64,
    /// Gauss–Newton iterations of the MAP refinement after the filter; zero
    /// keeps the filter output.
    pub smoothing_iterations: usize,
    /// Inflation of the matched-filter phase std for calibration-position error.
    pub phase_inflation: f64,
    /// Matched-filter validity threshold in noise stds.
    pub validity_threshold: f64,
    /// Smallest phase std used by the filter (rad).
    pub min_phase_std: f64,
    pub scheme: IntegrationScheme,
}

impl Default for AutofocusOptions {
    fn default() -> Self {
        Self {
            provisional_samples: None,
            calibration_points: 3,
            window: crate::imaging::DEFAULT_WINDOW,
            sweeps: 2,
            passes: 1,
            cancel_interference: true,
            calibration_std: 5e-3,
            smoothing_iterations: 20,
            phase_inflation: 1.5,
            validity_threshold: 3.0,
            min_phase_std: 1e-6,
            scheme: IntegrationScheme::Rectangle,
        }
    }
}

pub fn default_provisional_samples(m: usize) -> usize {
    8.max(m.div_ceil(10))
}

/// Per-bin noise std of a compressed cube from the median power, which is
/// `σ² ln 2` for circular Gaussian noise and insensitive to a few echo bins.
pub fn estimate_noise_std(cube: &RangeCube) -> f64 {
    let mut power: Vec<f64> = cube.values().iter().map(|v| v.norm_sqr()).collect();
    if power.is_empty() {
        return 0.0;
    }
    let mid = power.len() / 2;
    let (_, median, _) = power.select_nth_unstable_by(mid, f64::total_cmp);
    (*median / std::f64::consts::LN_2).sqrt()
}

#[derive(Debug, Clone)]
pub struct StepDiagnostics {
    pub delta_hat: Vec3,
    pub trace_p: f64,
    pub innovation_rms: f64,
    pub used: usize,
    pub skipped: bool,
}

#[derive(Debug, Clone)]
pub struct AutofocusResult {
    /// `q̂_m − δ̂_m`.
    pub corrected: Vec<Vec3>,
    /// Posterior state at each acquisition, starting with the anchor at m = 0.
    pub states: Vec<EkfState>,
    /// Calibration points with their fitted reflectivities.
    pub calib: Vec<PointEstimate>,
    pub steps: Vec<StepDiagnostics>,
    pub provisional_samples: usize,
    pub noise_std: f64,
}

impl AutofocusResult {
    /// Diagnostics CSV `m,dhat_x,dhat_y,dhat_z,d_x,d_y,d_z,trace_p,innovation_rms`;
    /// the true-error columns are empty when `truth` is `None`.
    pub fn write_diagnostics<W: Write>(&self, truth: Option<&[Vec3]>, mut w: W) -> Result<()> {
        writeln!(
            w,
            "m,dhat_x,dhat_y,dhat_z,d_x,d_y,d_z,trace_p,innovation_rms"
        )?;
        for (m, s) in self.steps.iter().enumerate() {
            let d = s.delta_hat;
            let t = match truth.and_then(|t| t.get(m)) {
                Some(t) => format!("{:.9e},{:.9e},{:.9e}", t.x, t.y, t.z),
                None => ",,".to_string(),
            };
            writeln!(
                w,
                "{m},{:.9e},{:.9e},{:.9e},{t},{:.9e},{:.6e}",
                d.x, d.y, d.z, s.trace_p, s.innovation_rms
            )?;
        }
        Ok(())
    }
}

/// Matched-filter output at the predicted delay of calibration point `q`
/// for element `n` at `e`, with the modelled echoes of the other points
/// removed when `cancel` is set; at this bandwidth they share a range cell.
#[allow(clippy::too_many_arguments)]
fn calibration_sample(
    spectra: &ProfileSpectra,
    cfg: &RadioConfig,
    n: usize,
    m: usize,
    e: &Vec3,
    calib: &[PointEstimate],
    q: usize,
    cancel: bool,
) -> Complex64 {
    let kappa = cfg.wavenumber();
    let nu = cfg.delay_bin((calib[q].position - e).norm());
    let mut y = spectra.sample(n, m, nu);
    if cancel {
        for (j, c) in calib.iter().enumerate() {
            if j != q {
                let r = (c.position - e).norm();
                let s = dirichlet_kernel(nu - cfg.delay_bin(r), cfg.subcarriers);
                y -= c.amplitude * Complex64::from_polar(s / (r * r), -kappa * r);
            }
        }
    }
    y
}

/// Matched-filter phases for every `(n, q)` at acquisition `m`, predicted
/// from the element positions implied by `centre`.
#[allow(clippy::too_many_arguments)]
fn acquisition_phases(
    spectra: &ProfileSpectra,
    cfg: &RadioConfig,
    m: usize,
    centre: &Vec3,
    calib: &[PointEstimate],
    array: &ArrayGeometry,
    noise_std: f64,
    opts: &AutofocusOptions,
) -> (Vec<MatchedFilterOutput>, Vec<f64>) {
    let mut out = Vec::with_capacity(array.len() * calib.len());
    let mut sigma = Vec::with_capacity(out.capacity());
    for n in 0..array.len() {
        let e = array.element_position(centre, n);
        for q in 0..calib.len() {
            let amplitude =
                calibration_sample(spectra, cfg, n, m, &e, calib, q, opts.cancel_interference);
            let mag = amplitude.norm();
            out.push(MatchedFilterOutput {
                amplitude,
                phase: amplitude.arg(),
                valid: mag > 0.0 && mag > opts.validity_threshold * noise_std,
            });
            let snr = mag * mag / (noise_std * noise_std).max(f64::MIN_POSITIVE);
            let s = opts.phase_inflation / (2.0 * snr).sqrt();
            sigma.push(if s.is_finite() {
                s.max(opts.min_phase_std)
            } else {
                opts.min_phase_std
            });
        }
    }
    (out, sigma)
}

/// One forward EKF pass over every acquisition with fixed calibration points.
#[allow(clippy::too_many_arguments)]
fn ekf_pass(
    spectra: &ProfileSpectra,
    cfg: &RadioConfig,
    q_hat: &[Vec3],
    array: &ArrayGeometry,
    calib: &[PointEstimate],
    spec: &ImuSpec,
    noise_std: f64,
    opts: &AutofocusOptions,
) -> Result<(Vec<EkfState>, Vec<StepDiagnostics>)> {
    let positions: Vec<Vec3> = calib.iter().map(|c| c.position).collect();
    let geom = ObservationGeometry::new(&positions, array, cfg, &q_hat[0]);
    let (reference, ref_sigma) =
        acquisition_phases(spectra, cfg, 0, &q_hat[0], calib, array, noise_std, opts);

    let mut state = EkfState::initial(spec);
    let mut states = vec![state.clone()];
    let mut steps = vec![StepDiagnostics {
        delta_hat: Vec3::zeros(),
        trace_p: state.cov.trace(),
        innovation_rms: 0.0,
        used: 0,
        skipped: false,
    }];
    for (m, q) in q_hat.iter().enumerate().skip(1) {
        let prior = predict(&state, spec, opts.scheme);
        let centre = q - prior.delta();
        let (current, sigma) =
            acquisition_phases(spectra, cfg, m, &centre, calib, array, noise_std, opts);
        let sigma: Vec<f64> = sigma
            .iter()
            .zip(&ref_sigma)
            .map(|(a, b)| a.max(*b))
            .collect();
        let obs = differential_phases(&current, &reference, &sigma)?;
        let outcome = update(&prior, &obs, &geom, q)?;
        state = outcome.state;
        steps.push(StepDiagnostics {
            delta_hat: state.delta(),
            trace_p: state.cov.trace(),
            innovation_rms: outcome.innovation_rms,
            used: outcome.used,
            skipped: outcome.skipped,
        });
        states.push(state.clone());
    }
    Ok((states, steps))
}

/// Normal equations and cost of the MAP problem at the current estimate.
/// Unknowns are ordered `[δ_1..δ_{M−1}, c_1..c_Q, φ_1..φ_Q]`.
#[allow(clippy::too_many_arguments)]
fn map_system(
    spectra: &ProfileSpectra,
    cfg: &RadioConfig,
    q_hat: &[Vec3],
    array: &ArrayGeometry,
    calib: &[PointEstimate],
    c_init: &[Vec3],
    deltas: &[Vec3],
    precision: &DMatrix<f64>,
    noise_std: f64,
    opts: &AutofocusOptions,
) -> (DMatrix<f64>, DVector<f64>, f64) {
    let kappa = cfg.wavenumber();
    let (mc, qn, nn) = (q_hat.len(), calib.len(), array.len());
    let nd = 3 * (mc - 1);
    let dim = nd + 4 * qn;
    let c_prec = if opts.calibration_std > 0.0 {
        1.0 / (opts.calibration_std * opts.calibration_std)
    } else {
        0.0
    };
    let mut a = DMatrix::<f64>::zeros(dim, dim);
    let mut b = DVector::<f64>::zeros(dim);
    let mut cost = 0.0;
    let mut idx = Vec::with_capacity(7);
    let mut row = Vec::with_capacity(7);
    for m in 0..mc {
        let centre = q_hat[m] - deltas[m];
        for n in 0..nn {
            let e = array.element_position(&centre, n);
            for q in 0..qn {
                let y =
                    calibration_sample(spectra, cfg, n, m, &e, calib, q, opts.cancel_interference);
                if !(y.norm() > opts.validity_threshold * noise_std) {
                    continue;
                }
                let r = (calib[q].position - e).norm();
                let res = wrap_phase(y.arg() - (calib[q].amplitude.arg() - kappa * r));
                let mag = calib[q].amplitude.norm() / (r * r);
                let sigma = (opts.phase_inflation
                    / (2.0 * mag * mag / (noise_std * noise_std)).sqrt())
                .max(opts.min_phase_std);
                let weight = 1.0 / (sigma * sigma);
                cost += weight * res * res;
                let u = (calib[q].position - e) / r;
                // sparse row: δ_m (if m ≥ 1), c_q, φ_q
                idx.clear();
                row.clear();
                if m >= 1 {
                    for k in 0..3 {
                        idx.push(3 * (m - 1) + k);
                        row.push(-kappa * u[k]);
                    }
                }
                for k in 0..3 {
                    idx.push(nd + 3 * q + k);
                    row.push(-kappa * u[k]);
                }
                idx.push(nd + 3 * qn + q);
                row.push(1.0);
                for (i, &ii) in idx.iter().enumerate() {
                    b[ii] += weight * row[i] * res;
                    for (j, &jj) in idx.iter().enumerate() {
                        a[(ii, jj)] += weight * row[i] * row[j];
                    }
                }
            }
        }
    }
    // path prior, Λ ⊗ I₃
    for i in 0..mc - 1 {
        for j in 0..mc - 1 {
            let l = precision[(i, j)];
            if l == 0.0 {
                continue;
            }
            for k in 0..3 {
                a[(3 * i + k, 3 * j + k)] += l;
                b[3 * i + k] -= l * deltas[j + 1][k];
                cost += l * deltas[i + 1][k] * deltas[j + 1][k];
            }
        }
    }
    for (q, (c, c0)) in calib.iter().zip(c_init).enumerate() {
        for k in 0..3 {
            let i = nd + 3 * q + k;
            let off = c.position[k] - c0[k];
            a[(i, i)] += c_prec;
            b[i] -= c_prec * off;
            cost += c_prec * off * off;
        }
        a[(nd + 3 * qn + q, nd + 3 * qn + q)] += 1e-9;
    }
    (a, b, cost)
}

/// Gauss–Newton MAP refinement of the whole error path, the calibration
/// positions and their reflectivity phases from absolute matched-filter
/// phases `arg y_{n,q,m} ≈ arg α_q − κ r_{n,q,m}`.
///
/// Unlike the filter's time differences, absolute phases keep the
/// inter-element phase at every acquisition, which fixes the joint rotation
/// of scene and path that the filter cannot see. The path prior is
/// `N(0, C_t ⊗ I₃)` and each calibration coordinate gets `N(c_init, σ_c²)`.
///
/// Steps are Levenberg–Marquardt damped and kept only when the MAP cost
/// drops. At high SNR an undamped step can jump a phase wrap and walk the
/// calibration points far from their prior.
#[allow(clippy::too_many_arguments)]
fn map_refine(
    spectra: &ProfileSpectra,
    cfg: &RadioConfig,
    q_hat: &[Vec3],
    array: &ArrayGeometry,
    calib: &mut [PointEstimate],
    deltas: &mut [Vec3],
    precision: &DMatrix<f64>,
    noise_std: f64,
    opts: &AutofocusOptions,
) -> Result<()> {
    let (mc, qn) = (q_hat.len(), calib.len());
    let nd = 3 * (mc - 1);
    let c_init: Vec<Vec3> = calib.iter().map(|c| c.position).collect();
    let system = |calib: &[PointEstimate], deltas: &[Vec3]| {
        map_system(
            spectra, cfg, q_hat, array, calib, &c_init, deltas, precision, noise_std, opts,
        )
    };
    let (mut a, mut b, mut cost) = system(calib, deltas);
    let mut damping = 1e-4;
    for _ in 0..opts.smoothing_iterations {
        let mut accepted = false;
        let mut small = false;
        for _ in 0..12 {
            let mut damped = a.clone();
            for i in 0..damped.nrows() {
                damped[(i, i)] *= 1.0 + damping;
            }
            let step = crate::linalg::SpdFactor::new(&damped)
                .map(|f| {
                    f.solve(&DMatrix::from_column_slice(b.len(), 1, b.as_slice()))
                        .column(0)
                        .into_owned()
                })
                .ok_or(Error::SingularBlock {
                    block: "map refinement",
                })?;
            let mut trial_calib = calib.to_vec();
            let mut trial_deltas = deltas.to_vec();
            for m in 1..mc {
                for k in 0..3 {
                    trial_deltas[m][k] += step[3 * (m - 1) + k];
                }
            }
            for (q, c) in trial_calib.iter_mut().enumerate() {
                for k in 0..3 {
                    c.position[k] += step[nd + 3 * q + k];
                }
                c.amplitude *= Complex64::from_polar(1.0, step[nd + 3 * qn + q]);
            }
            let next = system(&trial_calib, &trial_deltas);
            if next.2 <= cost {
                calib.copy_from_slice(&trial_calib);
                deltas.copy_from_slice(&trial_deltas);
                (a, b, cost) = next;
                damping = (damping / 3.0).max(1e-9);
                accepted = true;
                small = step.rows(0, nd).amax() < 1e-8;
                break;
            }
            damping *= 4.0;
        }
        if !accepted || small {
            break;
        }
    }
    Ok(())
}

/// Calibration from a provisional image of the first acquisitions, then
/// forward EKF passes. Every pass after the first re-fits the calibration
/// points over the whole aperture along the previous corrected trajectory.
pub fn run_autofocus(
    cube: &RangeCube,
    q_hat: &[Vec3],
    array: &ArrayGeometry,
    grid: &ImageGrid,
    spec: &ImuSpec,
    opts: &AutofocusOptions,
) -> Result<AutofocusResult> {
    let m_count = q_hat.len();
    if cube.slow_time() != m_count || cube.elements() != array.len() {
        return Err(Error::DimensionMismatch(
            "cube does not match trajectory/array".into(),
        ));
    }
    let m0 = opts
        .provisional_samples
        .unwrap_or_else(|| default_provisional_samples(m_count))
        .min(m_count);
    if m0 < 2 {
        return Err(Error::InvalidParameter(
            "provisional aperture needs >= 2 samples".into(),
        ));
    }
    if opts.passes == 0 {
        return Err(Error::InvalidParameter(
            "autofocus needs at least one pass".into(),
        ));
    }
    let joint = JointSettings {
        count: opts.calibration_points,
        sweeps: opts.sweeps,
        window: opts.window,
        refine: RefineSettings {
            initial_step: 0.25 * grid.spacing.min(),
            ..RefineSettings::default()
        },
    };
    let head = cube.truncate_slow_time(m0);
    let calib = detect_points(&head, &q_hat[..m0], array, grid, &joint)?;
    let mut out =
        autofocus_with_calibration(cube, q_hat, array, &calib, spec, opts, &joint.refine)?;
    out.provisional_samples = m0;
    Ok(out)
}

/// EKF passes from a given calibration set.
pub fn autofocus_with_calibration(
    cube: &RangeCube,
    q_hat: &[Vec3],
    array: &ArrayGeometry,
    calib: &[PointEstimate],
    spec: &ImuSpec,
    opts: &AutofocusOptions,
    refine: &RefineSettings,
) -> Result<AutofocusResult> {
    if cube.slow_time() != q_hat.len() || cube.elements() != array.len() {
        return Err(Error::DimensionMismatch(
            "cube does not match trajectory/array".into(),
        ));
    }
    if calib.is_empty() {
        return Err(Error::CalibrationFailed {
            found: 0,
            requested: opts.calibration_points,
        });
    }
    let cfg = *cube.radio();
    let noise_std = estimate_noise_std(cube);
    let spectra = ProfileSpectra::new(cube);
    let mut calib = calib.to_vec();
    let (mut states, mut steps) =
        ekf_pass(&spectra, &cfg, q_hat, array, &calib, spec, noise_std, opts)?;
    for _ in 1..opts.passes {
        let corrected: Vec<Vec3> = q_hat
            .iter()
            .zip(&states)
            .map(|(q, s)| q - s.delta())
            .collect();
        let model = PointModel::new(cube, &corrected, array)?;
        calib = refine_points(&model, &calib, opts.sweeps, refine)?;
        (states, steps) = ekf_pass(&spectra, &cfg, q_hat, array, &calib, spec, noise_std, opts)?;
    }
    let mut deltas: Vec<Vec3> = states.iter().map(|s| s.delta()).collect();
    let random = spec.accel_noise > 0.0 || spec.bias_std > 0.0;
    if opts.smoothing_iterations > 0 && random && q_hat.len() > 1 {
        let precision = error_covariance(spec, q_hat.len())?.temporal_precision()?;
        map_refine(
            &spectra,
            &cfg,
            q_hat,
            array,
            &mut calib,
            &mut deltas,
            &precision,
            noise_std,
            opts,
        )?;
    }
    let corrected = q_hat.iter().zip(&deltas).map(|(q, d)| q - d).collect();
    Ok(AutofocusResult {
        corrected,
        states,
        calib,
        steps,
        provisional_samples: 0,
        noise_std,
    })
}
