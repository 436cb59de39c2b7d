//! Known-aperture CRB and Bayesian CRB for point-target localization.
//!
//! Parameters are ordered `θ = [p, δ_1, …, δ_{M-1}, Re α, Im α]`. The start
//! of the aperture is the IMU reference, so `δ_0 = 0` is not a parameter.
//! The model is evaluated in the range-compressed domain, where the noise
//! on each bin is circular Gaussian with variance `σ_w²/K`.

use std::io::Write;

use nalgebra::{DMatrix, Matrix3};

use crate::linalg::{spd_inverse, symmetrize, SpdFactor};
use crate::trajectory::ErrorPrior;
use crate::waveform::{dirichlet_derivative, dirichlet_kernel, ArrayGeometry, RadioConfig};
use crate::{Complex64, Error, Result, Vec3};

/// Conditional mean of the range profiles for one point scatterer.
#[derive(Debug, Clone)]
pub struct MeanModel {
    pub alpha: Complex64,
    pub target: Vec3,
    /// Nominal phase-centre positions q̂_m.
    pub nominal: Vec<Vec3>,
    /// Trajectory errors δ_m; true positions are `q̂_m − δ_m`.
    pub errors: Vec<Vec3>,
    pub array: ArrayGeometry,
    pub cfg: RadioConfig,
}

impl MeanModel {
    /// Single antenna on a known trajectory.
    pub fn new(
        alpha: Complex64,
        target: Vec3,
        trajectory: Vec<Vec3>,
        cfg: RadioConfig,
    ) -> Result<Self> {
        Self::with_array(alpha, target, trajectory, ArrayGeometry::single(), cfg)
    }

    pub fn with_array(
        alpha: Complex64,
        target: Vec3,
        trajectory: Vec<Vec3>,
        array: ArrayGeometry,
        cfg: RadioConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let errors = vec![Vec3::zeros(); trajectory.len()];
        let model = Self {
            alpha,
            target,
            nominal: trajectory,
            errors,
            array,
            cfg,
        };
        for m in 0..model.slow_time() {
            for n in 0..model.array.len() {
                if !(model.range(m, n) > 0.0) {
                    return Err(Error::CoincidentPositions {
                        scatterer: 0,
                        antenna: n,
                        slow_time: m,
                    });
                }
            }
        }
        Ok(model)
    }

    pub fn slow_time(&self) -> usize {
        self.nominal.len()
    }

    pub fn element_position(&self, m: usize, n: usize) -> Vec3 {
        self.array
            .element_position(&(self.nominal[m] - self.errors[m]), n)
    }

    pub fn range(&self, m: usize, n: usize) -> f64 {
        (self.target - self.element_position(m, n)).norm()
    }

    /// Unit vector from element to target, i.e. `∂r/∂p`.
    pub fn direction(&self, m: usize, n: usize) -> Vec3 {
        (self.target - self.element_position(m, n)).normalize()
    }

    pub fn delay_bin(&self, m: usize, n: usize) -> f64 {
        self.cfg.delay_bin(self.range(m, n))
    }

    /// β = −2/r − jκ.
    pub fn beta(&self, m: usize, n: usize) -> Complex64 {
        Complex64::new(-2.0 / self.range(m, n), -self.cfg.wavenumber())
    }

    fn kernel(&self, nu: f64) -> (Vec<f64>, Vec<f64>) {
        let k = self.cfg.subcarriers;
        let s = (0..k).map(|l| dirichlet_kernel(l as f64 - nu, k)).collect();
        // d/dν S(ℓ − ν) = −S′(ℓ − ν)
        let ds = (0..k)
            .map(|l| dirichlet_derivative(l as f64 - nu, k))
            .collect();
        (s, ds)
    }

    fn gain(&self, r: f64) -> Complex64 {
        self.alpha / (r * r) * Complex64::from_polar(1.0, -self.cfg.wavenumber() * r)
    }

    /// μ for element `n` at slow time `m`.
    pub fn mu_element(&self, m: usize, n: usize) -> Vec<Complex64> {
        let r = self.range(m, n);
        let g = self.gain(r);
        self.kernel(self.cfg.delay_bin(r))
            .0
            .into_iter()
            .map(|s| g * s)
            .collect()
    }

    /// ∂μ/∂r for element `n` at slow time `m`, where `[s′(ν)]_ℓ = S′(ℓ − ν)`.
    pub fn mu_radial_element(&self, m: usize, n: usize) -> Vec<Complex64> {
        let r = self.range(m, n);
        let g = self.gain(r);
        let beta = self.beta(m, n);
        let rate = self.cfg.bins_per_metre();
        let (s, sd) = self.kernel(self.cfg.delay_bin(r));
        s.iter()
            .zip(&sd)
            .map(|(&s, &d)| g * (beta * s - rate * d))
            .collect()
    }

    pub fn mu_vector(&self, m: usize) -> Vec<Complex64> {
        self.mu_element(m, 0)
    }

    pub fn mu_radial_derivative(&self, m: usize) -> Vec<Complex64> {
        self.mu_radial_element(m, 0)
    }

    pub fn radial_sensitivity(&self, m: usize) -> f64 {
        self.radial_sensitivity_element(m, 0)
    }

    /// `I = ‖β s − (2B/c) s′‖² / ‖s‖²`.
    pub fn radial_sensitivity_element(&self, m: usize, n: usize) -> f64 {
        let beta = self.beta(m, n);
        let rate = self.cfg.bins_per_metre();
        let (s, sd) = self.kernel(self.delay_bin(m, n));
        let num: f64 = s
            .iter()
            .zip(&sd)
            .map(|(&s, &d)| (beta * s - rate * d).norm_sqr())
            .sum();
        let den: f64 = s.iter().map(|s| s * s).sum();
        num / den
    }

    /// All profiles stacked as `[(m, n, ℓ)]`, n-major within each m.
    pub fn mu_stack(&self) -> Vec<Complex64> {
        let mut out = Vec::new();
        for m in 0..self.slow_time() {
            for n in 0..self.array.len() {
                out.extend(self.mu_element(m, n));
            }
        }
        out
    }
}

/// Blocks of the Fisher information for `[p, δ, Re α, Im α]`.
#[derive(Debug, Clone)]
pub struct FimBlocks {
    pub pp: Matrix3<f64>,
    /// 3 × 3(M−1).
    pub p_delta: DMatrix<f64>,
    /// 3(M−1) × 3(M−1), block diagonal.
    pub delta_delta: DMatrix<f64>,
    /// 3 × 2.
    pub p_alpha: DMatrix<f64>,
    /// 3(M−1) × 2.
    pub delta_alpha: DMatrix<f64>,
    /// 2 × 2.
    pub alpha_alpha: DMatrix<f64>,
}

impl FimBlocks {
    pub fn error_dim(&self) -> usize {
        self.delta_delta.nrows()
    }

    /// Full symmetric FIM in parameter order `[p, δ, Re α, Im α]`.
    pub fn full(&self) -> DMatrix<f64> {
        let d = self.error_dim();
        let n = 3 + d + 2;
        let mut j = DMatrix::zeros(n, n);
        j.view_mut((0, 0), (3, 3)).copy_from(&self.pp);
        j.view_mut((0, 3), (3, d)).copy_from(&self.p_delta);
        j.view_mut((3, 0), (d, 3))
            .copy_from(&self.p_delta.transpose());
        j.view_mut((3, 3), (d, d)).copy_from(&self.delta_delta);
        j.view_mut((0, 3 + d), (3, 2)).copy_from(&self.p_alpha);
        j.view_mut((3 + d, 0), (2, 3))
            .copy_from(&self.p_alpha.transpose());
        j.view_mut((3, 3 + d), (d, 2)).copy_from(&self.delta_alpha);
        j.view_mut((3 + d, 3), (2, d))
            .copy_from(&self.delta_alpha.transpose());
        j.view_mut((3 + d, 3 + d), (2, 2))
            .copy_from(&self.alpha_alpha);
        j
    }
}

/// `[J]_{ij} = (2/σ²) Re Σ (∂μ/∂θ_i)ᴴ (∂μ/∂θ_j)` with `σ²` the per-bin noise
/// variance of the compressed profiles.
pub fn fisher_blocks(model: &MeanModel, noise_var: f64) -> Result<FimBlocks> {
    let m_count = model.slow_time();
    if m_count < 2 {
        return Err(Error::DegenerateAperture { samples: m_count });
    }
    if !(noise_var > 0.0) {
        return Err(Error::InvalidParameter(
            "noise variance must be positive".into(),
        ));
    }
    let d = 3 * (m_count - 1);
    let w = 2.0 / noise_var;
    let mut pp = Matrix3::zeros();
    let mut p_delta = DMatrix::zeros(3, d);
    let mut delta_delta = DMatrix::zeros(d, d);
    let mut p_alpha = DMatrix::zeros(3, 2);
    let mut delta_alpha = DMatrix::zeros(d, 2);
    let mut alpha_alpha = DMatrix::zeros(2, 2);
    for m in 0..m_count {
        let mut block = Matrix3::zeros();
        let mut cross = [Vec3::zeros(), Vec3::zeros()];
        for n in 0..model.array.len() {
            let u = model.direction(m, n);
            let g = model.mu_radial_element(m, n);
            // ∂μ/∂Re α = μ/α; computed directly so α = 0 is fine
            let r = model.range(m, n);
            let unit_gain = Complex64::from_polar(1.0 / (r * r), -model.cfg.wavenumber() * r);
            let (s, _) = model.kernel(model.cfg.delay_bin(r));
            let h: Vec<Complex64> = s.iter().map(|&s| unit_gain * s).collect();
            let gg: f64 = g.iter().map(|v| v.norm_sqr()).sum();
            let gh: Complex64 = g.iter().zip(&h).map(|(a, b)| a.conj() * b).sum();
            let hh: f64 = h.iter().map(|v| v.norm_sqr()).sum();
            block += u * u.transpose() * (w * gg);
            // Re(gᴴ h) and Re(gᴴ j h) = −Im(gᴴ h)
            cross[0] += u * (w * gh.re);
            cross[1] += u * (-w * gh.im);
            alpha_alpha[(0, 0)] += w * hh;
            alpha_alpha[(1, 1)] += w * hh;
        }
        pp += block;
        for c in 0..2 {
            for i in 0..3 {
                p_alpha[(i, c)] += cross[c][i];
            }
        }
        if m >= 1 {
            let o = 3 * (m - 1);
            p_delta.view_mut((0, o), (3, 3)).copy_from(&block);
            delta_delta.view_mut((o, o), (3, 3)).copy_from(&block);
            for c in 0..2 {
                for i in 0..3 {
                    delta_alpha[(o + i, c)] = cross[c][i];
                }
            }
        }
    }
    Ok(FimBlocks {
        pp,
        p_delta,
        delta_delta,
        p_alpha,
        delta_alpha,
        alpha_alpha,
    })
}

#[derive(Debug, Clone)]
pub struct BcrbReport {
    /// Known-trajectory bound with α as nuisance.
    pub crb_known: Matrix3<f64>,
    /// Bayesian bound under the trajectory prior.
    pub bcrb: Matrix3<f64>,
    /// Bayesian bound with α known (nuisance terms dropped).
    pub bcrb_known_reflectivity: Matrix3<f64>,
    /// `Ψ = J_δδ + C_t⁻¹ ⊗ I₃`.
    pub psi: DMatrix<f64>,
    pub radial_sensitivity: Vec<f64>,
}

impl BcrbReport {
    pub fn sqrt_trace_crb(&self) -> f64 {
        self.crb_known.trace().max(0.0).sqrt()
    }

    pub fn sqrt_trace_bcrb(&self) -> f64 {
        self.bcrb.trace().max(0.0).sqrt()
    }

    pub fn axis_std_crb(&self) -> Vec3 {
        self.crb_known.diagonal().map(|v| v.max(0.0).sqrt())
    }

    pub fn axis_std_bcrb(&self) -> Vec3 {
        self.bcrb.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

fn to_matrix3(m: &DMatrix<f64>) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| m[(i, j)])
}

fn invert3(m: &DMatrix<f64>, block: &'static str) -> Result<Matrix3<f64>> {
    spd_inverse(m)
        .map(|i| to_matrix3(&i))
        .ok_or(Error::SingularBlock { block })
}

/// Known-trajectory bound: δ removed, α kept as nuisance.
pub fn crb_known(blocks: &FimBlocks) -> Result<Matrix3<f64>> {
    let s_alpha =
        SpdFactor::new(&blocks.alpha_alpha).ok_or(Error::SingularBlock { block: "alpha" })?;
    let pp = DMatrix::from_fn(3, 3, |i, j| blocks.pp[(i, j)]);
    let mut inner = pp - &blocks.p_alpha * s_alpha.solve(&blocks.p_alpha.transpose());
    symmetrize(&mut inner);
    invert3(&inner, "position")
}

/// Schur-complement Bayesian bound on p, marginalizing δ (with prior) and α.
pub fn bcrb_position(blocks: &FimBlocks, prior: &ErrorPrior) -> Result<BcrbReport> {
    let d = blocks.error_dim();
    if prior.dim() * 3 != d {
        return Err(Error::DimensionMismatch(format!(
            "prior covers {} errors, FIM has {}",
            prior.dim(),
            d / 3
        )));
    }
    let precision = prior.temporal_precision()?;
    let mut psi = blocks.delta_delta.clone();
    for i in 0..prior.dim() {
        for j in 0..prior.dim() {
            let v = precision[(i, j)];
            for k in 0..3 {
                psi[(3 * i + k, 3 * j + k)] += v;
            }
        }
    }
    symmetrize(&mut psi);
    let psi_f = SpdFactor::new(&psi).ok_or(Error::SingularBlock { block: "psi" })?;

    let pp = DMatrix::from_fn(3, 3, |i, j| blocks.pp[(i, j)]);
    let psi_pd = psi_f.solve(&blocks.p_delta.transpose());
    let psi_da = psi_f.solve(&blocks.delta_alpha);
    let mut reduced_pp = &pp - &blocks.p_delta * &psi_pd;
    symmetrize(&mut reduced_pp);
    let mut s_alpha = &blocks.alpha_alpha - blocks.delta_alpha.transpose() * &psi_da;
    symmetrize(&mut s_alpha);
    let g = &blocks.p_alpha - &blocks.p_delta * &psi_da;
    let s_f = SpdFactor::new(&s_alpha).ok_or(Error::SingularBlock { block: "s_alpha" })?;
    let mut inner = &reduced_pp - &g * s_f.solve(&g.transpose());
    symmetrize(&mut inner);

    let bcrb = invert3(&inner, "position")?;
    let bcrb_known_reflectivity = invert3(&reduced_pp, "position")?;
    Ok(BcrbReport {
        crb_known: crb_known(blocks)?,
        bcrb,
        bcrb_known_reflectivity,
        psi,
        radial_sensitivity: Vec::new(),
    })
}

/// Convenience: FIM at the given per-subcarrier SNR and the Bayesian report.
///
/// SNR is `|α/r₀²|²/σ_w²` per subcarrier sample, with `r₀` the distance from
/// the aperture centroid to the target. The compressed-domain noise variance
/// is then `σ_w²/K`.
pub fn bound_at_snr(model: &MeanModel, prior: &ErrorPrior, snr_db: f64) -> Result<BcrbReport> {
    let noise = compressed_noise_variance(model, snr_db);
    let blocks = fisher_blocks(model, noise)?;
    let mut report = bcrb_position(&blocks, prior)?;
    report.radial_sensitivity = (0..model.slow_time())
        .map(|m| model.radial_sensitivity(m))
        .collect();
    Ok(report)
}

/// Per-subcarrier noise power `σ_w²` giving the requested SNR.
pub fn subcarrier_noise_power(model: &MeanModel, snr_db: f64) -> f64 {
    let centroid = model.nominal.iter().sum::<Vec3>() / model.slow_time().max(1) as f64;
    let r0 = (model.target - centroid).norm();
    let peak = model.alpha.norm_sqr() / r0.powi(4);
    peak / 10f64.powf(snr_db / 10.0)
}

pub fn compressed_noise_variance(model: &MeanModel, snr_db: f64) -> f64 {
    subcarrier_noise_power(model, snr_db) / model.cfg.subcarriers as f64
}

/// One row of the bound-versus-SNR table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundRow {
    pub snr_db: f64,
    pub sqrt_trace_crb: f64,
    pub sqrt_trace_bcrb: f64,
    /// Set when the Bayesian bound is at least twice the known-aperture
    /// bound, i.e. the trajectory prior dominates.
    pub floor: bool,
}

impl BoundRow {
    pub fn from_report(snr_db: f64, report: &BcrbReport) -> Self {
        let crb = report.sqrt_trace_crb();
        let bcrb = report.sqrt_trace_bcrb();
        Self {
            snr_db,
            sqrt_trace_crb: crb,
            sqrt_trace_bcrb: bcrb,
            floor: bcrb >= 2.0 * crb,
        }
    }
}

pub fn write_bound_csv<W: Write>(rows: &[BoundRow], mut w: W) -> Result<()> {
    writeln!(w, "snr_db,sqrt_trace_crb,sqrt_trace_bcrb,floor_flag")?;
    for r in rows {
        writeln!(
            w,
            "{:.3},{:.9e},{:.9e},{}",
            r.snr_db, r.sqrt_trace_crb, r.sqrt_trace_bcrb, r.floor as u8
        )?;
    }
    Ok(())
}
