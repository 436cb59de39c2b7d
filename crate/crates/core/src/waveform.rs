//! OFDM echo synthesis, equalization and range compression.
//!
//! Subcarrier `k` sits at `fc + (k - (K-1)/2)·Δf`, i.e. the carrier is the
//! band centre, and range compression uses the matching centred inverse DFT.
//! With that pairing a point echo compresses to exactly
//! `(α/r²)·e^{-jκr}·S(ℓ-ν)` with the real Dirichlet kernel `S`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Vec3, SPEED_OF_LIGHT};

/// Residual self-interference power ceiling (linear), -30 dB.
pub const SELF_INTERFERENCE_CEILING: f64 = 1e-3;

const KERNEL_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RadioConfig {
    /// Carrier (band-centre) frequency in Hz.
    pub carrier_hz: f64,
    /// Occupied bandwidth in Hz.
    pub bandwidth_hz: f64,
    /// Number of subcarriers.
    pub subcarriers: usize,
}

impl Default for RadioConfig {
    fn default() -> Self {
        Self {
            carrier_hz: 28e9,
            bandwidth_hz: 200e6,
            subcarriers: 64,
        }
    }
}

impl RadioConfig {
    pub fn new(carrier_hz: f64, bandwidth_hz: f64, subcarriers: usize) -> Result<Self> {
        let cfg = Self {
            carrier_hz,
            bandwidth_hz,
            subcarriers,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.carrier_hz > 0.0) || !(self.bandwidth_hz > 0.0) {
            return Err(Error::InvalidParameter(
                "carrier and bandwidth must be positive".into(),
            ));
        }
        if self.subcarriers < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 subcarriers, got {}",
                self.subcarriers
            )));
        }
        Ok(())
    }

    pub fn subcarrier_spacing(&self) -> f64 {
        self.bandwidth_hz / self.subcarriers as f64
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    /// Round-trip wavenumber κ = 4π/λ (rad/m).
    pub fn wavenumber(&self) -> f64 {
        4.0 * PI / self.wavelength()
    }

    pub fn range_resolution(&self) -> f64 {
        SPEED_OF_LIGHT / (2.0 * self.bandwidth_hz)
    }

    /// Delay-bin index per metre of one-way range, 2B/c.
    pub fn bins_per_metre(&self) -> f64 {
        2.0 * self.bandwidth_hz / SPEED_OF_LIGHT
    }

    /// Fractional delay bin ν = 2Br/c of a one-way range.
    pub fn delay_bin(&self, range: f64) -> f64 {
        self.bins_per_metre() * range
    }

    /// Signed subcarrier offset `k - (K-1)/2` from the band centre.
    pub fn centred_index(&self, k: usize) -> f64 {
        k as f64 - 0.5 * (self.subcarriers as f64 - 1.0)
    }

    pub fn subcarrier_frequency(&self, k: usize) -> f64 {
        self.carrier_hz + self.centred_index(k) * self.subcarrier_spacing()
    }
}

/// Periodic Dirichlet kernel `S(ν) = sin(πν) / (K sin(πν/K))`.
pub fn dirichlet_kernel(nu: f64, k: usize) -> f64 {
    let kf = k as f64;
    let den = (PI * nu / kf).sin();
    if den.abs() < KERNEL_GUARD {
        (PI * nu).cos() / (PI * nu / kf).cos()
    } else {
        (PI * nu).sin() / (kf * den)
    }
}

/// Derivative `S'(ν)` of [`dirichlet_kernel`].
pub fn dirichlet_derivative(nu: f64, k: usize) -> f64 {
    let kf = k as f64;
    // distance to the nearest removable singularity ν = jK
    let j = (nu / kf).round();
    let x = nu - j * kf;
    if x.abs() < 1e-5 {
        let peak = (PI * j * kf).cos() / (PI * j).cos();
        return -peak * PI * PI * x / 3.0 * (1.0 - 1.0 / (kf * kf));
    }
    let num = (PI * nu).sin();
    let num_d = PI * (PI * nu).cos();
    let den = kf * (PI * nu / kf).sin();
    let den_d = PI * (PI * nu / kf).cos();
    (num_d * den - num * den_d) / (den * den)
}

/// Transmit/receive chain figures used in the radar equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkBudget {
    /// Transmit power (W).
    pub tx_power: f64,
    pub tx_gain: f64,
    pub rx_gain: f64,
}

impl Default for LinkBudget {
    fn default() -> Self {
        Self {
            tx_power: 1.0,
            tx_gain: 1.0,
            rx_gain: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    pub position: Vec3,
    /// Radar cross-section (m²).
    pub rcs: f64,
    /// Cross-polarisation coupling in (0, 1].
    pub cross_pol: f64,
    /// Reflection phase (rad).
    pub phase: f64,
}

impl Scatterer {
    pub fn new(position: Vec3, rcs: f64) -> Self {
        Self {
            position,
            rcs,
            cross_pol: 1.0,
            phase: 0.0,
        }
    }

    pub fn with_phase(mut self, phase: f64) -> Self {
        self.phase = phase.rem_euclid(2.0 * PI);
        self
    }

    pub fn with_cross_pol(mut self, chi: f64) -> Self {
        self.cross_pol = chi;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.rcs < 0.0 || !self.rcs.is_finite() {
            return Err(Error::InvalidParameter(format!("rcs {} < 0", self.rcs)));
        }
        if self.cross_pol.abs() > 1.0 {
            return Err(Error::InvalidParameter(format!(
                "cross-pol coupling {} exceeds 1",
                self.cross_pol
            )));
        }
        Ok(())
    }
}

/// Complex echo amplitude from the radar equation,
/// `sqrt(Pt Gt Gr λ² σ / (4π)³) · χ · e^{jθ}`.
pub fn complex_amplitude(scat: &Scatterer, link: &LinkBudget, cfg: &RadioConfig) -> Complex64 {
    let lambda = cfg.wavelength();
    let mag = (link.tx_power * link.tx_gain * link.rx_gain * lambda * lambda * scat.rcs
        / (4.0 * PI).powi(3))
    .sqrt();
    Complex64::from_polar(mag * scat.cross_pol, scat.phase)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scatterers: Vec<Scatterer>,
    pub link: LinkBudget,
    /// Residual self-interference coefficient γ.
    pub self_interference: Complex64,
    /// Per-subcarrier noise power σ_w². Zero gives a noiseless simulation.
    pub noise_power: f64,
}

impl Scene {
    pub fn new(scatterers: Vec<Scatterer>, noise_power: f64) -> Self {
        Self {
            scatterers,
            link: LinkBudget::default(),
            self_interference: Complex64::new(0.0, 0.0),
            noise_power,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.scatterers {
            s.validate()?;
        }
        if self.noise_power < 0.0 || !self.noise_power.is_finite() {
            return Err(Error::InvalidParameter("noise power must be >= 0".into()));
        }
        if self.self_interference.norm_sqr() > SELF_INTERFERENCE_CEILING {
            return Err(Error::InvalidParameter(format!(
                "self-interference {:.1} dB exceeds the -30 dB ceiling",
                10.0 * self.self_interference.norm_sqr().log10()
            )));
        }
        Ok(())
    }

    pub fn amplitudes(&self, cfg: &RadioConfig) -> Vec<Complex64> {
        self.scatterers
            .iter()
            .map(|s| complex_amplitude(s, &self.link, cfg))
            .collect()
    }
}

/// Element displacements relative to the array phase centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    displacements: Vec<Vec3>,
}

impl ArrayGeometry {
    pub fn new(displacements: Vec<Vec3>) -> Result<Self> {
        if displacements.is_empty() {
            return Err(Error::InvalidParameter(
                "array needs at least one element".into(),
            ));
        }
        let mean: Vec3 = displacements.iter().sum::<Vec3>() / displacements.len() as f64;
        let scale = displacements.iter().map(|d| d.norm()).fold(1e-3, f64::max);
        if mean.norm() > 1e-9 * scale {
            return Err(Error::InvalidParameter(
                "element displacements must average to the phase centre".into(),
            ));
        }
        Ok(Self { displacements })
    }

    pub fn single() -> Self {
        Self {
            displacements: vec![Vec3::zeros()],
        }
    }

    /// 2×2 planar array in the x–z plane.
    pub fn planar_2x2(spacing: f64) -> Self {
        let h = 0.5 * spacing;
        Self {
            displacements: vec![
                Vec3::new(-h, 0.0, -h),
                Vec3::new(h, 0.0, -h),
                Vec3::new(-h, 0.0, h),
                Vec3::new(h, 0.0, h),
            ],
        }
    }

    /// Uniform linear array along x.
    pub fn linear_x(elements: usize, spacing: f64) -> Self {
        let centre = 0.5 * (elements as f64 - 1.0);
        Self {
            displacements: (0..elements.max(1))
                .map(|n| Vec3::new((n as f64 - centre) * spacing, 0.0, 0.0))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.displacements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.displacements.is_empty()
    }

    pub fn displacements(&self) -> &[Vec3] {
        &self.displacements
    }

    /// Element position `q_m + d_n`.
    pub fn element_position(&self, centre: &Vec3, n: usize) -> Vec3 {
        centre + self.displacements[n]
    }
}

/// Range-compressed profiles `z_{n,m}[ℓ]`, shape N × M × K.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeCube {
    elements: usize,
    slow_time: usize,
    cfg: RadioConfig,
    values: Vec<Complex64>,
}

impl RangeCube {
    pub fn zeros(elements: usize, slow_time: usize, cfg: RadioConfig) -> Self {
        Self {
            elements,
            slow_time,
            cfg,
            values: vec![Complex64::new(0.0, 0.0); elements * slow_time * cfg.subcarriers],
        }
    }

    pub fn elements(&self) -> usize {
        self.elements
    }

    pub fn slow_time(&self) -> usize {
        self.slow_time
    }

    pub fn bins(&self) -> usize {
        self.cfg.subcarriers
    }

    pub fn radio(&self) -> &RadioConfig {
        &self.cfg
    }

    fn offset(&self, n: usize, m: usize) -> usize {
        (n * self.slow_time + m) * self.cfg.subcarriers
    }

    pub fn profile(&self, n: usize, m: usize) -> &[Complex64] {
        let o = self.offset(n, m);
        &self.values[o..o + self.cfg.subcarriers]
    }

    pub fn profile_mut(&mut self, n: usize, m: usize) -> &mut [Complex64] {
        let o = self.offset(n, m);
        let k = self.cfg.subcarriers;
        &mut self.values[o..o + k]
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    /// Restrict to the first `m0` acquisitions.
    pub fn truncate_slow_time(&self, m0: usize) -> RangeCube {
        let m0 = m0.min(self.slow_time);
        let mut out = RangeCube::zeros(self.elements, m0, self.cfg);
        for n in 0..self.elements {
            for m in 0..m0 {
                out.profile_mut(n, m).copy_from_slice(self.profile(n, m));
            }
        }
        out
    }

    pub fn scaled_add(&self, other: &RangeCube, scale: Complex64) -> Result<RangeCube> {
        if self.elements != other.elements
            || self.slow_time != other.slow_time
            || self.cfg.subcarriers != other.cfg.subcarriers
        {
            return Err(Error::DimensionMismatch(
                "range cubes differ in shape".into(),
            ));
        }
        let mut out = self.clone();
        for (a, b) in out.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(out)
    }
}

/// Unit-modulus QPSK symbols.
pub fn qpsk_symbols<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<Complex64> {
    let a = std::f64::consts::FRAC_1_SQRT_2;
    (0..k)
        .map(|_| {
            let re = if rng.random::<bool>() { a } else { -a };
            let im = if rng.random::<bool>() { a } else { -a };
            Complex64::new(re, im)
        })
        .collect()
}

/// Circular complex Gaussian sample with variance `power`.
pub fn complex_gaussian<R: Rng + ?Sized>(power: f64, rng: &mut R) -> Complex64 {
    let s = (0.5 * power).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

/// Frequency-domain received samples `Y_{n,m}[k]` for one acquisition, N × K.
pub fn synthesize_received<R: Rng + ?Sized>(
    scene: &Scene,
    array: &ArrayGeometry,
    centre: &Vec3,
    symbols: &[Complex64],
    cfg: &RadioConfig,
    rng: &mut R,
) -> Result<DMatrix<Complex64>> {
    synthesize_received_at(scene, array, centre, symbols, cfg, 0, rng)
}

fn synthesize_received_at<R: Rng + ?Sized>(
    scene: &Scene,
    array: &ArrayGeometry,
    centre: &Vec3,
    symbols: &[Complex64],
    cfg: &RadioConfig,
    slow_time: usize,
    rng: &mut R,
) -> Result<DMatrix<Complex64>> {
    let k_count = cfg.subcarriers;
    if symbols.len() != k_count {
        return Err(Error::DimensionMismatch(format!(
            "{} symbols for {} subcarriers",
            symbols.len(),
            k_count
        )));
    }
    let amps = scene.amplitudes(cfg);
    let kappa = cfg.wavenumber();
    let n_count = array.len();
    let mut y = DMatrix::from_element(n_count, k_count, Complex64::new(0.0, 0.0));
    for n in 0..n_count {
        let antenna = array.element_position(centre, n);
        // per-scatterer path gain and per-subcarrier phase step
        let mut paths = Vec::with_capacity(amps.len());
        for (q, (scat, alpha)) in scene.scatterers.iter().zip(&amps).enumerate() {
            let r = (scat.position - antenna).norm();
            if r <= 0.0 {
                return Err(Error::CoincidentPositions {
                    scatterer: q,
                    antenna: n,
                    slow_time,
                });
            }
            let tau = 2.0 * r / SPEED_OF_LIGHT;
            paths.push((alpha / (r * r), r, tau));
        }
        for k in 0..k_count {
            let offset = cfg.centred_index(k) * cfg.subcarrier_spacing();
            let mut echo = Complex64::new(0.0, 0.0);
            for &(gain, r, tau) in &paths {
                // 2π f_k τ split as κr + 2π (f_k - fc) τ to keep precision
                let phase = kappa * r + 2.0 * PI * offset * tau;
                echo += gain * Complex64::from_polar(1.0, -phase);
            }
            let mut v = (scene.self_interference + echo) * symbols[k];
            if scene.noise_power > 0.0 {
                v += complex_gaussian(scene.noise_power, rng);
            }
            y[(n, k)] = v;
        }
    }
    Ok(y)
}

/// `Ỹ[k] = Y[k]/S[k] - γ̂`.
pub fn equalize_and_cancel(
    y: &DMatrix<Complex64>,
    symbols: &[Complex64],
    gamma_hat: Complex64,
) -> Result<DMatrix<Complex64>> {
    if symbols.len() != y.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{} symbols for {} subcarriers",
            symbols.len(),
            y.ncols()
        )));
    }
    if let Some(k) = symbols.iter().position(|s| s.norm_sqr() == 0.0) {
        return Err(Error::ZeroSymbol { subcarrier: k });
    }
    let mut out = y.clone();
    for (k, s) in symbols.iter().enumerate() {
        for n in 0..y.nrows() {
            out[(n, k)] = y[(n, k)] / s - gamma_hat;
        }
    }
    Ok(out)
}

/// Centred inverse DFT along subcarriers:
/// `z[ℓ] = (1/K) Σ_k Ỹ[k] e^{j2π(k-(K-1)/2)ℓ/K}`.
pub fn range_compress(y_eq: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let k_count = y_eq.ncols();
    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(k_count);
    let ramp: Vec<Complex64> = (0..k_count)
        .map(|l| {
            Complex64::from_polar(
                1.0 / k_count as f64,
                -PI * (k_count as f64 - 1.0) * l as f64 / k_count as f64,
            )
        })
        .collect();
    let mut out = y_eq.clone();
    let mut buf = vec![Complex64::new(0.0, 0.0); k_count];
    for n in 0..y_eq.nrows() {
        for k in 0..k_count {
            buf[k] = y_eq[(n, k)];
        }
        ifft.process(&mut buf);
        for l in 0..k_count {
            out[(n, l)] = buf[l] * ramp[l];
        }
    }
    out
}

/// Self-interference estimate: mean of `Y/S` over target-free calibration frames.
pub fn estimate_self_interference(
    frames: &[(DMatrix<Complex64>, Vec<Complex64>)],
) -> Result<Complex64> {
    let mut acc = Complex64::new(0.0, 0.0);
    let mut count = 0usize;
    for (y, symbols) in frames {
        let eq = equalize_and_cancel(y, symbols, Complex64::new(0.0, 0.0))?;
        acc += eq.iter().sum::<Complex64>();
        count += eq.len();
    }
    if count == 0 {
        return Err(Error::InvalidParameter("no calibration frames".into()));
    }
    Ok(acc / count as f64)
}

/// How the receiver obtains γ̂.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelfInterferenceMode {
    /// γ̂ = γ.
    #[default]
    Oracle,
    /// γ̂ from `frames` target-free frames drawn with the scene's noise.
    Estimated { frames: usize },
}

/// Full per-acquisition chain (symbols, echo synthesis, equalization,
/// range compression) along a trajectory of phase-centre positions.
pub fn synthesize_cube<R: Rng + ?Sized>(
    scene: &Scene,
    array: &ArrayGeometry,
    trajectory: &[Vec3],
    cfg: &RadioConfig,
    mode: SelfInterferenceMode,
    rng: &mut R,
) -> Result<RangeCube> {
    scene.validate()?;
    cfg.validate()?;
    let gamma_hat = match mode {
        SelfInterferenceMode::Oracle => scene.self_interference,
        SelfInterferenceMode::Estimated { frames } => {
            let empty = Scene {
                scatterers: Vec::new(),
                ..scene.clone()
            };
            let origin = trajectory.first().copied().unwrap_or_else(Vec3::zeros);
            let mut cal = Vec::with_capacity(frames);
            for _ in 0..frames.max(1) {
                let s = qpsk_symbols(cfg.subcarriers, rng);
                let y = synthesize_received(&empty, array, &origin, &s, cfg, rng)?;
                cal.push((y, s));
            }
            estimate_self_interference(&cal)?
        }
    };
    let mut cube = RangeCube::zeros(array.len(), trajectory.len(), *cfg);
    for (m, centre) in trajectory.iter().enumerate() {
        let symbols = qpsk_symbols(cfg.subcarriers, rng);
        let y = synthesize_received_at(scene, array, centre, &symbols, cfg, m, rng)?;
        let z = range_compress(&equalize_and_cancel(&y, &symbols, gamma_hat)?);
        for n in 0..array.len() {
            let dst = cube.profile_mut(n, m);
            for (l, v) in dst.iter_mut().enumerate() {
                *v = z[(n, l)];
            }
        }
    }
    Ok(cube)
}

/// Noise-free compressed profile of one point echo, straight from the
/// closed form `(α/r²) e^{-jκr} S(ℓ - ν)`.
pub fn point_profile(alpha: Complex64, range: f64, cfg: &RadioConfig) -> Vec<Complex64> {
    let nu = cfg.delay_bin(range);
    let gain = alpha / (range * range) * Complex64::from_polar(1.0, -cfg.wavenumber() * range);
    (0..cfg.subcarriers)
        .map(|l| gain * dirichlet_kernel(l as f64 - nu, cfg.subcarriers))
        .collect()
}
