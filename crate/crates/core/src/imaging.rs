//! Near-field backprojection, calibration-point extraction and localization.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};

use crate::waveform::{dirichlet_kernel, ArrayGeometry, RadioConfig, RangeCube};
use crate::{Complex64, Error, Result, Vec3};

/// Default number of Dirichlet taps used for fractional-delay interpolation.
pub const DEFAULT_WINDOW: usize = 8;

/// Complex image over a regular voxel grid. Voxel `(ix, iy, iz)` lives at
/// flat index `(iz·ny + iy)·nx + ix`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub origin: Vec3,
    pub spacing: Vec3,
    pub dims: [usize; 3],
    pub values: Vec<Complex64>,
}

impl ImageGrid {
    pub fn new(origin: Vec3, spacing: Vec3, dims: [usize; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidParameter(
                "grid spacing must be positive".into(),
            ));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidParameter(
                "grid dimensions must be >= 1".into(),
            ));
        }
        let len = dims[0] * dims[1] * dims[2];
        Ok(Self {
            origin,
            spacing,
            dims,
            values: vec![Complex64::new(0.0, 0.0); len],
        })
    }

    /// Horizontal slice centred on `centre`, `half_x`/`half_y` wide, at height `centre.z`.
    pub fn plane_xy(centre: Vec3, half_x: f64, half_y: f64, spacing: f64) -> Result<Self> {
        let nx = (2.0 * half_x / spacing).round() as usize + 1;
        let ny = (2.0 * half_y / spacing).round() as usize + 1;
        let origin = centre
            - Vec3::new(
                0.5 * (nx - 1) as f64 * spacing,
                0.5 * (ny - 1) as f64 * spacing,
                0.0,
            );
        Self::new(origin, Vec3::new(spacing, spacing, spacing), [nx, ny, 1])
    }

    /// Full 3-D box centred on `centre`.
    pub fn volume(centre: Vec3, half: Vec3, spacing: f64) -> Result<Self> {
        let n = |h: f64| (2.0 * h / spacing).round() as usize + 1;
        let dims = [n(half.x), n(half.y), n(half.z)];
        let origin = centre
            - Vec3::new(
                0.5 * (dims[0] - 1) as f64 * spacing,
                0.5 * (dims[1] - 1) as f64 * spacing,
                0.5 * (dims[2] - 1) as f64 * spacing,
            );
        Self::new(origin, Vec3::new(spacing, spacing, spacing), dims)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.dims[1] + iy) * self.dims[0] + ix
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Position at fractional voxel coordinates.
    pub fn position_at(&self, c: [f64; 3]) -> Vec3 {
        self.origin
            + Vec3::new(
                c[0] * self.spacing.x,
                c[1] * self.spacing.y,
                c[2] * self.spacing.z,
            )
    }

    pub fn position(&self, idx: usize) -> Vec3 {
        let c = self.coords(idx);
        self.position_at([c[0] as f64, c[1] as f64, c[2] as f64])
    }

    /// Same grid with every value cleared.
    pub fn blank(&self) -> Self {
        Self {
            values: vec![Complex64::new(0.0, 0.0); self.values.len()],
            ..self.clone()
        }
    }

    pub fn peak_magnitude(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// CSV with columns `x,y,z,re,im,mag_db`, magnitude relative to the peak.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,y,z,re,im,mag_db")?;
        let peak = self.peak_magnitude();
        for (idx, v) in self.values.iter().enumerate() {
            let p = self.position(idx);
            let db = if peak > 0.0 && v.norm() > 0.0 {
                20.0 * (v.norm() / peak).log10()
            } else {
                f64::NEG_INFINITY
            };
            let db = db.max(-300.0);
            writeln!(
                w,
                "{:.6},{:.6},{:.6},{:.9e},{:.9e},{:.3}",
                p.x, p.y, p.z, v.re, v.im, db
            )?;
        }
        Ok(())
    }

    /// Binary 8-bit PGM of the x–y magnitude (maximum over z), dB-scaled
    /// over `dynamic_db` below the peak. Rows run from high y to low y.
    pub fn write_pgm<W: Write>(&self, dynamic_db: f64, mut w: W) -> Result<()> {
        let [nx, ny, nz] = self.dims;
        let peak = self.peak_magnitude();
        write!(w, "P5\n{nx} {ny}\n255\n")?;
        let mut row = Vec::with_capacity(nx);
        for iy in (0..ny).rev() {
            row.clear();
            for ix in 0..nx {
                let mag = (0..nz)
                    .map(|iz| self.values[self.index(ix, iy, iz)].norm())
                    .fold(0.0, f64::max);
                let level = if peak > 0.0 && mag > 0.0 {
                    let db = 20.0 * (mag / peak).log10();
                    ((db + dynamic_db) / dynamic_db).clamp(0.0, 1.0) * 255.0
                } else {
                    0.0
                };
                row.push(level.round() as u8);
            }
            w.write_all(&row)?;
        }
        Ok(())
    }
}

/// Band-limited interpolation of a compressed profile at fractional bin `ν`.
///
/// For `window < K` this is the normalized matched sum
/// `Σ z[ℓ] S(ℓ−ν) / Σ S(ℓ−ν)²` over the `window` nearest bins; for
/// `window ≥ K` the plain sum over all bins, which is exact for any
/// profile produced by the centred IDFT. Bins outside `[0, K)` wrap with the
/// sign `(−1)^{K−1}` per period. Returns `None` when `ν` is outside `[0, K)`.
pub fn interpolate_profile(z: &[Complex64], nu: f64, window: usize) -> Option<Complex64> {
    let k = z.len();
    if !(nu >= 0.0 && nu < k as f64) {
        return None;
    }
    let nearest = nu.round();
    if (nu - nearest).abs() < 1e-12 {
        return Some(z[(nearest as usize) % k]);
    }
    if window >= k {
        let sum: Complex64 = z
            .iter()
            .enumerate()
            .map(|(l, v)| v * dirichlet_kernel(l as f64 - nu, k))
            .sum();
        return Some(sum);
    }
    let w = window.max(1) as isize;
    let start = nu.floor() as isize - (w - 1) / 2;
    let flip = k.is_multiple_of(2);
    let mut num = Complex64::new(0.0, 0.0);
    let mut den = 0.0;
    for l in start..start + w {
        let periods = l.div_euclid(k as isize);
        let wrapped = l.rem_euclid(k as isize) as usize;
        let sign = if flip && periods % 2 != 0 { -1.0 } else { 1.0 };
        let s = dirichlet_kernel(l as f64 - nu, k);
        num += z[wrapped] * (sign * s);
        den += s * s;
    }
    Some(if den > 0.0 {
        num / den
    } else {
        Complex64::new(0.0, 0.0)
    })
}

/// Image value at one point, accumulated in fixed `(m, n)` order.
/// Returns the value and the number of out-of-window lookups.
pub fn backproject_point(
    cube: &RangeCube,
    trajectory: &[Vec3],
    array: &ArrayGeometry,
    point: &Vec3,
    window: usize,
) -> (Complex64, usize) {
    let cfg = cube.radio();
    let kappa = cfg.wavenumber();
    let rate = cfg.bins_per_metre();
    let mut acc = Complex64::new(0.0, 0.0);
    let mut misses = 0;
    for (m, q) in trajectory.iter().enumerate().take(cube.slow_time()) {
        for n in 0..cube.elements() {
            let r = (point - array.element_position(q, n)).norm();
            match interpolate_profile(cube.profile(n, m), rate * r, window) {
                Some(v) => acc += v * Complex64::from_polar(1.0, kappa * r),
                None => misses += 1,
            }
        }
    }
    (acc, misses)
}

fn check_shapes(cube: &RangeCube, trajectory: &[Vec3], array: &ArrayGeometry) -> Result<()> {
    if cube.slow_time() != trajectory.len() || cube.elements() != array.len() {
        return Err(Error::DimensionMismatch(format!(
            "cube is {}×{} (N×M), trajectory has {} samples, array {} elements",
            cube.elements(),
            cube.slow_time(),
            trajectory.len(),
            array.len()
        )));
    }
    Ok(())
}

/// Backprojection image over `grid`, plus the out-of-window lookup count.
pub fn backproject_with_stats(
    cube: &RangeCube,
    trajectory: &[Vec3],
    array: &ArrayGeometry,
    grid: &ImageGrid,
    window: usize,
) -> Result<(ImageGrid, usize)> {
    check_shapes(cube, trajectory, array)?;
    let voxel =
        |idx: usize| backproject_point(cube, trajectory, array, &grid.position(idx), window);
    #[cfg(feature = "parallel")]
    let cells: Vec<(Complex64, usize)> = {
        use rayon::prelude::*;
        (0..grid.len()).into_par_iter().map(voxel).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let cells: Vec<(Complex64, usize)> = (0..grid.len()).map(voxel).collect();
    let misses = cells.iter().map(|c| c.1).sum();
    let mut out = grid.blank();
    for (dst, (v, _)) in out.values.iter_mut().zip(cells) {
        *dst = v;
    }
    Ok((out, misses))
}

/// `I(r_g) = Σ_m Σ_n z_{n,m}[ν̂] e^{+jκ r̂}` over every voxel.
pub fn backproject(
    cube: &RangeCube,
    trajectory: &[Vec3],
    array: &ArrayGeometry,
    grid: &ImageGrid,
    window: usize,
) -> Result<ImageGrid> {
    Ok(backproject_with_stats(cube, trajectory, array, grid, window)?.0)
}

/// Strongest local maxima of `|I|²` used as phase references.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub points: Vec<Vec3>,
    pub magnitudes: Vec<f64>,
    /// Voxel indices of the unrefined maxima.
    pub voxels: Vec<usize>,
    /// False when fewer maxima than requested were found.
    pub complete: bool,
}

impl CalibrationSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn neighbours(grid: &ImageGrid, idx: usize) -> impl Iterator<Item = usize> + '_ {
    let c = grid.coords(idx);
    let d = grid.dims;
    (-1isize..=1)
        .flat_map(|dz| (-1isize..=1).flat_map(move |dy| (-1isize..=1).map(move |dx| [dx, dy, dz])))
        .filter(|o| *o != [0, 0, 0])
        .filter_map(move |o| {
            let x = c[0] as isize + o[0];
            let y = c[1] as isize + o[1];
            let z = c[2] as isize + o[2];
            let inside = x >= 0
                && y >= 0
                && z >= 0
                && (x as usize) < d[0]
                && (y as usize) < d[1]
                && (z as usize) < d[2];
            inside.then(|| grid.index(x as usize, y as usize, z as usize))
        })
}

/// Voxels whose `|I|²` strictly exceeds every in-grid 26-neighbour, sorted by
/// descending power, ties by ascending flat index.
pub fn local_maxima(grid: &ImageGrid) -> Vec<usize> {
    let power: Vec<f64> = grid.values.iter().map(|v| v.norm_sqr()).collect();
    let mut found: Vec<usize> = (0..grid.len())
        .filter(|&i| power[i] > 0.0 && neighbours(grid, i).all(|j| power[i] > power[j]))
        .collect();
    found.sort_by(|&a, &b| power[b].total_cmp(&power[a]).then(a.cmp(&b)));
    found
}

/// Separable three-point quadratic refinement of `|I|²` around a voxel,
/// returned as fractional voxel coordinates.
pub fn refine_voxel(grid: &ImageGrid, idx: usize) -> [f64; 3] {
    let c = grid.coords(idx);
    let mut out = [c[0] as f64, c[1] as f64, c[2] as f64];
    for axis in 0..3 {
        if c[axis] == 0 || c[axis] + 1 >= grid.dims[axis] {
            continue;
        }
        let at = |offset: isize| {
            let mut cc = c;
            cc[axis] = (c[axis] as isize + offset) as usize;
            grid.values[grid.index(cc[0], cc[1], cc[2])].norm_sqr()
        };
        let (a, b, d) = (at(-1), at(0), at(1));
        let curv = a - 2.0 * b + d;
        if curv < 0.0 {
            out[axis] += (0.5 * (a - d) / curv).clamp(-0.5, 0.5);
        }
    }
    out
}

pub fn extract_calibration(image: &ImageGrid, q: usize) -> Result<CalibrationSet> {
    if q == 0 {
        return Err(Error::InvalidParameter(
            "calibration count must be >= 1".into(),
        ));
    }
    if image.peak_magnitude() == 0.0 {
        return Err(Error::EmptyImage);
    }
    let maxima = local_maxima(image);
    let take: Vec<usize> = maxima.into_iter().take(q).collect();
    Ok(CalibrationSet {
        points: take
            .iter()
            .map(|&i| image.position_at(refine_voxel(image, i)))
            .collect(),
        magnitudes: take.iter().map(|&i| image.values[i].norm()).collect(),
        complete: take.len() == q,
        voxels: take,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Localization {
    pub position: Vec3,
    pub peak: f64,
}

/// Refined global maximum of `|I|`.
pub fn localize(image: &ImageGrid) -> Result<Localization> {
    let (idx, peak) = image
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| (i, v.norm()))
        .fold(
            (0, -1.0),
            |best, cur| if cur.1 > best.1 { cur } else { best },
        );
    if !(peak > 0.0) {
        return Err(Error::EmptyImage);
    }
    Ok(Localization {
        position: image.position_at(refine_voxel(image, idx)),
        peak,
    })
}

/// Settings for continuous peak refinement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineSettings {
    /// Initial stencil half-width (m).
    pub initial_step: f64,
    /// Stop once the stencil shrinks below this (m).
    pub final_step: f64,
    pub max_iterations: usize,
}

impl Default for RefineSettings {
    fn default() -> Self {
        Self {
            initial_step: 1e-3,
            final_step: 1e-6,
            max_iterations: 60,
        }
    }
}

/// Maximize a smooth function near `start` by repeated full quadratic fits on
/// a 3×3×3 stencil with a box trust region that halves on interior steps.
pub fn maximize_local<F: Fn(&Vec3) -> f64>(
    f: F,
    start: Vec3,
    settings: &RefineSettings,
) -> (Vec3, f64) {
    let mut x = start;
    let mut fx = f(&x);
    let mut h = settings.initial_step;
    let offsets: Vec<Vec3> = (-1..=1)
        .flat_map(|i| {
            (-1..=1)
                .flat_map(move |j| (-1..=1).map(move |k| Vec3::new(i as f64, j as f64, k as f64)))
        })
        .collect();
    // design matrix for c + gᵀu + ½uᵀHu in stencil units
    let design = DMatrix::from_fn(offsets.len(), 10, |r, c| {
        let u = offsets[r];
        match c {
            0 => 1.0,
            1 => u.x,
            2 => u.y,
            3 => u.z,
            4 => 0.5 * u.x * u.x,
            5 => 0.5 * u.y * u.y,
            6 => 0.5 * u.z * u.z,
            7 => u.x * u.y,
            8 => u.x * u.z,
            _ => u.y * u.z,
        }
    });
    let pinv = design
        .clone()
        .pseudo_inverse(1e-12)
        .expect("stencil design has full rank");
    for _ in 0..settings.max_iterations {
        if h < settings.final_step {
            break;
        }
        let values: Vec<f64> = offsets.iter().map(|u| f(&(x + u * h))).collect();
        let coef = &pinv * DVector::from_vec(values.clone());
        let g = Vec3::new(coef[1], coef[2], coef[3]);
        let hess = Matrix3::new(
            coef[4], coef[7], coef[8], coef[7], coef[5], coef[9], coef[8], coef[9], coef[6],
        );
        let (best_i, best_v) =
            values.iter().enumerate().fold(
                (13, values[13]),
                |b, (i, &v)| if v > b.1 { (i, v) } else { b },
            );
        let mut candidate = None;
        if hess.symmetric_eigenvalues().max() < 0.0 {
            if let Some(inv) = hess.try_inverse() {
                let step = (-(inv * g)).map(|s| s.clamp(-1.0, 1.0));
                let p = x + step * h;
                let v = f(&p);
                candidate = Some((step, p, v));
            }
        }
        match candidate {
            Some((step, p, v)) if v >= best_v && v >= fx => {
                x = p;
                fx = v;
                if step.amax() < 0.5 {
                    h *= 0.5;
                }
            }
            _ => {
                if best_v > fx {
                    x += offsets[best_i] * h;
                    fx = best_v;
                } else {
                    h *= 0.5;
                }
            }
        }
    }
    (x, fx)
}

/// Continuous refinement of the image peak around `start`, maximizing
/// `|I(p)|²` evaluated directly from the cube with `window` taps.
pub fn refine_peak(
    cube: &RangeCube,
    trajectory: &[Vec3],
    array: &ArrayGeometry,
    start: Vec3,
    window: usize,
    settings: &RefineSettings,
) -> Result<Localization> {
    check_shapes(cube, trajectory, array)?;
    let (p, v) = maximize_local(
        |p| {
            backproject_point(cube, trajectory, array, p, window)
                .0
                .norm_sqr()
        },
        start,
        settings,
    );
    if !(v > 0.0) {
        return Err(Error::EmptyImage);
    }
    Ok(Localization {
        position: p,
        peak: v.sqrt(),
    })
}

/// Centred spectra `Y_c = (1/K) Σ_ℓ z[ℓ] e^{j2πcℓ/K}` of every profile.
///
/// `Σ_ℓ z[ℓ] S(ℓ−ν) = Σ_c Y_c e^{−j2πcν/K}`, so the full-band interpolation
/// costs K complex multiplies and no kernel evaluations.
#[derive(Debug, Clone)]
pub struct ProfileSpectra {
    k: usize,
    slow_time: usize,
    data: Vec<Complex64>,
}

impl ProfileSpectra {
    pub fn new(cube: &RangeCube) -> Self {
        let k = cube.bins();
        let kf = k as f64;
        let c0 = -0.5 * (kf - 1.0);
        let table: Vec<Complex64> = (0..k * k)
            .map(|i| {
                let (c, l) = (i / k, i % k);
                Complex64::from_polar(1.0 / kf, 2.0 * PI * (c as f64 + c0) * l as f64 / kf)
            })
            .collect();
        let mut data = Vec::with_capacity(cube.values().len());
        for n in 0..cube.elements() {
            for m in 0..cube.slow_time() {
                let z = cube.profile(n, m);
                for c in 0..k {
                    let row = &table[c * k..(c + 1) * k];
                    data.push(row.iter().zip(z).map(|(t, v)| t * v).sum());
                }
            }
        }
        Self {
            k,
            slow_time: cube.slow_time(),
            data,
        }
    }

    /// `Σ_ℓ z_{n,m}[ℓ] S(ℓ−ν)`.
    pub fn sample(&self, n: usize, m: usize, nu: f64) -> Complex64 {
        let k = self.k;
        let y = &self.data[(n * self.slow_time + m) * k..][..k];
        let c0 = -0.5 * (k as f64 - 1.0);
        let step = Complex64::from_polar(1.0, -2.0 * PI * nu / k as f64);
        let mut rot = Complex64::from_polar(1.0, -2.0 * PI * c0 * nu / k as f64);
        let mut acc = Complex64::new(0.0, 0.0);
        for v in y {
            acc += v * rot;
            rot *= step;
        }
        acc
    }
}

/// A point scatterer: position and complex reflectivity, so that its echo
/// in profile `(n, m)` is `α (1/r²) e^{−jκr} S(ℓ−ν)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointEstimate {
    pub position: Vec3,
    pub amplitude: Complex64,
}

/// Inner products between the data and unit-reflectivity point echoes
/// `μ(p)` over a fixed trajectory and array.
pub struct PointModel<'a> {
    spectra: ProfileSpectra,
    trajectory: &'a [Vec3],
    array: &'a ArrayGeometry,
    cfg: RadioConfig,
}

impl<'a> PointModel<'a> {
    pub fn new(cube: &RangeCube, trajectory: &'a [Vec3], array: &'a ArrayGeometry) -> Result<Self> {
        check_shapes(cube, trajectory, array)?;
        Ok(Self {
            spectra: ProfileSpectra::new(cube),
            trajectory,
            array,
            cfg: *cube.radio(),
        })
    }

    pub fn spectra(&self) -> &ProfileSpectra {
        &self.spectra
    }

    fn for_each_range<F: FnMut(usize, usize, f64)>(&self, p: &Vec3, mut f: F) {
        for (m, q) in self.trajectory.iter().enumerate() {
            for n in 0..self.array.len() {
                f(n, m, (p - self.array.element_position(q, n)).norm());
            }
        }
    }

    /// `⟨μ(p), z⟩ = Σ_{m,n} r⁻² e^{+jκr} Σ_ℓ z[ℓ] S(ℓ−ν)`.
    pub fn correlate(&self, p: &Vec3) -> Complex64 {
        let kappa = self.cfg.wavenumber();
        let rate = self.cfg.bins_per_metre();
        let mut acc = Complex64::new(0.0, 0.0);
        self.for_each_range(p, |n, m, r| {
            acc += self.spectra.sample(n, m, rate * r)
                * Complex64::from_polar(1.0 / (r * r), kappa * r);
        });
        acc
    }

    /// `‖μ(p)‖² = Σ r⁻⁴`, using `Σ_ℓ S(ℓ−ν)² = 1`.
    pub fn energy(&self, p: &Vec3) -> f64 {
        let mut acc = 0.0;
        self.for_each_range(p, |_, _, r| acc += 1.0 / (r * r * r * r));
        acc
    }

    /// `⟨μ(a), μ(b)⟩ = Σ r_a⁻² r_b⁻² e^{jκ(r_a−r_b)} S(ν_a−ν_b)`.
    pub fn cross(&self, a: &Vec3, b: &Vec3) -> Complex64 {
        let kappa = self.cfg.wavenumber();
        let rate = self.cfg.bins_per_metre();
        let k = self.cfg.subcarriers;
        let mut acc = Complex64::new(0.0, 0.0);
        for q in self.trajectory {
            for n in 0..self.array.len() {
                let e = self.array.element_position(q, n);
                let (ra, rb) = ((a - e).norm(), (b - e).norm());
                let s = dirichlet_kernel(rate * (ra - rb), k);
                acc += Complex64::from_polar(s / (ra * ra * rb * rb), kappa * (ra - rb));
            }
        }
        acc
    }

    /// Projection of the data onto `μ(p)` after removing `others`.
    pub fn residual_correlation(&self, p: &Vec3, others: &[PointEstimate]) -> Complex64 {
        others.iter().fold(self.correlate(p), |acc, o| {
            acc - o.amplitude * self.cross(p, &o.position)
        })
    }

    /// Least-squares reflectivities for fixed positions.
    pub fn fit_amplitudes(&self, positions: &[Vec3]) -> Result<Vec<Complex64>> {
        let q = positions.len();
        let gram = DMatrix::from_fn(q, q, |i, j| {
            if i == j {
                Complex64::new(self.energy(&positions[i]), 0.0)
            } else {
                self.cross(&positions[i], &positions[j])
            }
        });
        let rhs = DVector::from_iterator(q, positions.iter().map(|p| self.correlate(p)));
        gram.lu()
            .solve(&rhs)
            .map(|a| a.iter().copied().collect())
            .ok_or(Error::SingularBlock {
                block: "scatterer gram",
            })
    }
}

/// Settings for joint detection and refinement of several point scatterers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointSettings {
    /// Number of scatterers in the model.
    pub count: usize,
    /// Alternating refinement passes after detection.
    pub sweeps: usize,
    /// Interpolation taps of the detection images.
    pub window: usize,
    pub refine: RefineSettings,
}

impl Default for JointSettings {
    fn default() -> Self {
        Self {
            count: 3,
            sweeps: 2,
            window: DEFAULT_WINDOW,
            refine: RefineSettings::default(),
        }
    }
}

/// Re-estimate scatterer `i` with the others held fixed: maximize
/// `|⟨μ(p), z − Σ_{j≠i} α_j μ(p_j)⟩|² / ‖μ(p)‖²` from its current position.
fn refine_one(model: &PointModel, points: &mut [PointEstimate], i: usize, refine: &RefineSettings) {
    let others: Vec<PointEstimate> = points
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, p)| *p)
        .collect();
    let cost = |p: &Vec3| model.residual_correlation(p, &others).norm_sqr() / model.energy(p);
    let (p, _) = maximize_local(cost, points[i].position, refine);
    points[i] = PointEstimate {
        position: p,
        amplitude: model.residual_correlation(&p, &others) / model.energy(&p),
    };
}

/// Alternating refinement of every scatterer, then a joint amplitude fit.
pub fn refine_points(
    model: &PointModel,
    start: &[PointEstimate],
    sweeps: usize,
    refine: &RefineSettings,
) -> Result<Vec<PointEstimate>> {
    let mut points = start.to_vec();
    for _ in 0..sweeps {
        for i in 0..points.len() {
            refine_one(model, &mut points, i, refine);
        }
    }
    let positions: Vec<Vec3> = points.iter().map(|p| p.position).collect();
    let amps = model.fit_amplitudes(&positions)?;
    for (p, a) in points.iter_mut().zip(amps) {
        p.amplitude = a;
    }
    Ok(points)
}

/// Subtract modelled echoes from a cube.
pub fn subtract_points(
    cube: &RangeCube,
    trajectory: &[Vec3],
    array: &ArrayGeometry,
    points: &[PointEstimate],
) -> Result<RangeCube> {
    check_shapes(cube, trajectory, array)?;
    let cfg = *cube.radio();
    let (kappa, rate, k) = (cfg.wavenumber(), cfg.bins_per_metre(), cfg.subcarriers);
    let mut out = cube.clone();
    for (m, q) in trajectory.iter().enumerate() {
        for n in 0..array.len() {
            let e = array.element_position(q, n);
            let z = out.profile_mut(n, m);
            for pt in points {
                let r = (pt.position - e).norm();
                let gain = pt.amplitude * Complex64::from_polar(1.0 / (r * r), -kappa * r);
                let nu = rate * r;
                for (l, v) in z.iter_mut().enumerate() {
                    *v -= gain * dirichlet_kernel(l as f64 - nu, k);
                }
            }
        }
    }
    Ok(out)
}

/// Successive detection of `count` scatterers: each new one starts at the
/// strongest peak of the image of the residual left by those already found,
/// and is refined against them. Ends with `sweeps` alternating passes.
pub fn detect_points(
    cube: &RangeCube,
    trajectory: &[Vec3],
    array: &ArrayGeometry,
    grid: &ImageGrid,
    settings: &JointSettings,
) -> Result<Vec<PointEstimate>> {
    if settings.count == 0 {
        return Err(Error::InvalidParameter(
            "scatterer count must be >= 1".into(),
        ));
    }
    let model = PointModel::new(cube, trajectory, array)?;
    let mut points: Vec<PointEstimate> = Vec::with_capacity(settings.count);
    for _ in 0..settings.count {
        let residual = subtract_points(cube, trajectory, array, &points)?;
        let image = backproject(&residual, trajectory, array, grid, settings.window)?;
        let Some(&idx) = local_maxima(&image).first() else {
            break;
        };
        points.push(PointEstimate {
            position: image.position_at(refine_voxel(&image, idx)),
            amplitude: Complex64::new(0.0, 0.0),
        });
        let last = points.len() - 1;
        refine_one(&model, &mut points, last, &settings.refine);
    }
    if points.len() < settings.count {
        return Err(Error::CalibrationFailed {
            found: points.len(),
            requested: settings.count,
        });
    }
    refine_points(&model, &points, settings.sweeps, &settings.refine)
}

/// Peak magnitude `M·N·|α|/r²` expected from ideal coherent integration.
pub fn coherent_peak(alpha: Complex64, range: f64, slow_time: usize, elements: usize) -> f64 {
    (slow_time * elements) as f64 * alpha.norm() / (range * range)
}

/// Default grid spacing, a quarter wavelength.
pub fn default_spacing(cfg: &RadioConfig) -> f64 {
    cfg.wavelength() / 4.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::waveform::point_profile;

    fn cfg() -> RadioConfig {
        RadioConfig::default()
    }

    #[test]
    fn integer_bin_is_exact_and_zero_is_zero() {
        let z: Vec<Complex64> = (0..64)
            .map(|l| Complex64::new(l as f64, -(l as f64)))
            .collect();
        for w in [1, 8, 64] {
            assert_eq!(interpolate_profile(&z, 5.0, w), Some(z[5]));
        }
        let zero = vec![Complex64::new(0.0, 0.0); 64];
        assert_eq!(
            interpolate_profile(&zero, 3.3, 8),
            Some(Complex64::new(0.0, 0.0))
        );
        assert_eq!(interpolate_profile(&z, 64.0, 8), None);
        assert_eq!(interpolate_profile(&z, -0.1, 8), None);
    }

    #[test]
    fn off_grid_recovery() {
        let c = cfg();
        let alpha = Complex64::new(0.7, 0.2);
        for r in [0.21, 0.3377, 0.9] {
            let z = point_profile(alpha, r, &c);
            let nu = c.delay_bin(r);
            let expect = alpha / (r * r) * Complex64::from_polar(1.0, -c.wavenumber() * r);
            for w in [8, 64] {
                let v = interpolate_profile(&z, nu, w).unwrap();
                assert!((v - expect).norm() < 0.01 * expect.norm(), "r={r} w={w}");
            }
            // full sum reproduces the band-limited profile anywhere
            let probe = nu + 0.37;
            let v = interpolate_profile(&z, probe, 64).unwrap();
            let exact = alpha / (r * r)
                * Complex64::from_polar(1.0, -c.wavenumber() * r)
                * dirichlet_kernel(probe - nu, 64);
            assert!((v - exact).norm() < 1e-9 * expect.norm());
        }
    }

    #[test]
    fn wrapped_window_matches_full_sum_near_zero() {
        let c = cfg();
        let z = point_profile(Complex64::new(1.0, 0.0), 0.05, &c);
        let nu = c.delay_bin(0.05);
        let a = interpolate_profile(&z, nu, 8).unwrap();
        let b = interpolate_profile(&z, nu, 64).unwrap();
        assert!((a - b).norm() < 1e-3 * b.norm());
    }

    #[test]
    fn grid_indexing_round_trip() {
        let g = ImageGrid::new(
            Vec3::new(1.0, 2.0, 3.0),
            Vec3::new(0.1, 0.2, 0.3),
            [4, 3, 2],
        )
        .unwrap();
        for idx in 0..g.len() {
            let c = g.coords(idx);
            assert_eq!(g.index(c[0], c[1], c[2]), idx);
        }
        let p = g.position(g.index(1, 2, 1));
        assert!((p - Vec3::new(1.1, 2.4, 3.3)).norm() < 1e-12);
        assert!(ImageGrid::new(Vec3::zeros(), Vec3::new(0.0, 1.0, 1.0), [1, 1, 1]).is_err());
        assert!(ImageGrid::new(Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0), [0, 1, 1]).is_err());
    }

    fn quadratic_peak(grid: &ImageGrid, centre: [f64; 3]) -> ImageGrid {
        let mut g = grid.blank();
        for idx in 0..g.len() {
            let c = g.coords(idx);
            let d2: f64 = (0..3).map(|a| (c[a] as f64 - centre[a]).powi(2)).sum();
            g.values[idx] = Complex64::new((100.0 - d2).max(0.0).sqrt(), 0.0);
        }
        g
    }

    #[test]
    fn injected_peak_recovered() {
        let grid = ImageGrid::new(Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0), [9, 9, 9]).unwrap();
        let g = quadratic_peak(&grid, [4.3, 3.8, 4.1]);
        let cal = extract_calibration(&g, 1).unwrap();
        assert!(cal.complete);
        assert!((cal.points[0] - Vec3::new(4.3, 3.8, 4.1)).norm() < 0.25);
    }

    #[test]
    fn constant_image_has_no_maxima() {
        let mut g = ImageGrid::new(Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0), [5, 5, 1]).unwrap();
        g.values
            .iter_mut()
            .for_each(|v| *v = Complex64::new(1.0, 0.0));
        let cal = extract_calibration(&g, 2).unwrap();
        assert!(cal.is_empty() && !cal.complete);
        assert!(matches!(
            extract_calibration(&g.blank(), 1),
            Err(Error::EmptyImage)
        ));
    }

    #[test]
    fn equal_peaks_tie_break_by_index() {
        let mut g = ImageGrid::new(Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0), [7, 3, 1]).unwrap();
        let (a, b) = (g.index(5, 1, 0), g.index(1, 1, 0));
        g.values[a] = Complex64::new(2.0, 0.0);
        g.values[b] = Complex64::new(0.0, 2.0);
        let cal = extract_calibration(&g, 2).unwrap();
        assert_eq!(cal.voxels, vec![b, a]);
    }

    #[test]
    fn translation_equivariance() {
        let grid = ImageGrid::new(Vec3::zeros(), Vec3::new(0.5, 0.5, 0.5), [12, 12, 1]).unwrap();
        let a = localize(&quadratic_peak(&grid, [4.2, 5.4, 0.0])).unwrap();
        let b = localize(&quadratic_peak(&grid, [5.2, 5.4, 0.0])).unwrap();
        assert!((b.position - a.position - Vec3::new(0.5, 0.0, 0.0)).norm() < 1e-12);
        assert!(matches!(localize(&grid), Err(Error::EmptyImage)));
    }

    #[test]
    fn maximizer_finds_correlated_quadratic_peak() {
        let target = Vec3::new(0.3e-3, -0.7e-3, 0.2e-3);
        let f = |p: &Vec3| {
            let d = p - target;
            -(4.0 * d.x * d.x + 3.0 * d.x * d.y + d.y * d.y + 2.0 * d.z * d.z)
        };
        let (x, _) = maximize_local(f, Vec3::zeros(), &RefineSettings::default());
        assert!((x - target).norm() < 1e-9);
    }

    #[test]
    fn pgm_and_csv_shapes() {
        let grid = ImageGrid::new(Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0), [3, 2, 1]).unwrap();
        let g = quadratic_peak(&grid, [1.0, 1.0, 0.0]);
        let mut pgm = Vec::new();
        g.write_pgm(40.0, &mut pgm).unwrap();
        assert!(pgm.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(pgm.len(), b"P5\n3 2\n255\n".len() + 6);
        assert!(pgm.contains(&255));
        let mut csv = Vec::new();
        g.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.lines().any(|l| l.ends_with(",0.000")));
    }

    fn two_point_cube(points: &[PointEstimate], traj: &[Vec3], array: &ArrayGeometry) -> RangeCube {
        let c = cfg();
        let mut cube = RangeCube::zeros(array.len(), traj.len(), c);
        for (m, q) in traj.iter().enumerate() {
            for n in 0..array.len() {
                let e = array.element_position(q, n);
                let z = cube.profile_mut(n, m);
                for p in points {
                    let prof = point_profile(p.amplitude, (p.position - e).norm(), &c);
                    for (v, w) in z.iter_mut().zip(prof) {
                        *v += w;
                    }
                }
            }
        }
        cube
    }

    fn short_sweep() -> Vec<Vec3> {
        (0..12)
            .map(|i| {
                Vec3::new(
                    -0.015 + 0.0027 * i as f64,
                    0.0,
                    0.002 * (i as f64 * 0.5).sin(),
                )
            })
            .collect()
    }

    #[test]
    fn spectra_sample_equals_full_sum() {
        let c = cfg();
        let z = point_profile(Complex64::new(0.3, -1.1), 0.2718, &c);
        let mut cube = RangeCube::zeros(1, 1, c);
        cube.profile_mut(0, 0).copy_from_slice(&z);
        let spectra = ProfileSpectra::new(&cube);
        for nu in [0.0, 0.37, 5.5, 31.9, 63.2] {
            let direct: Complex64 = z
                .iter()
                .enumerate()
                .map(|(l, v)| v * dirichlet_kernel(l as f64 - nu, 64))
                .sum();
            assert!(
                (spectra.sample(0, 0, nu) - direct).norm() < 1e-12 * direct.norm().max(1e-3),
                "nu={nu}"
            );
        }
    }

    #[test]
    fn model_inner_products_match_explicit_profiles() {
        let traj = short_sweep();
        let array = ArrayGeometry::planar_2x2(cfg().wavelength() / 2.0);
        let a = Vec3::new(0.02, 0.25, 0.0);
        let b = Vec3::new(-0.1, 0.2, 0.01);
        let unit = PointEstimate {
            position: b,
            amplitude: Complex64::new(1.0, 0.0),
        };
        let cube = two_point_cube(&[unit], &traj, &array);
        let model = PointModel::new(&cube, &traj, &array).unwrap();
        // explicit ⟨μ(a), μ(b)⟩ from sampled profiles
        let ua = two_point_cube(
            &[PointEstimate {
                position: a,
                ..unit
            }],
            &traj,
            &array,
        );
        let explicit: Complex64 = ua
            .values()
            .iter()
            .zip(cube.values())
            .map(|(x, y)| x.conj() * y)
            .sum();
        assert!((model.cross(&a, &b) - explicit).norm() < 1e-9 * explicit.norm());
        assert!((model.correlate(&a) - explicit).norm() < 1e-9 * explicit.norm());
        let energy: f64 = cube.values().iter().map(|v| v.norm_sqr()).sum();
        assert!((model.energy(&b) - energy).abs() < 1e-9 * energy);
    }

    #[test]
    fn joint_detection_recovers_unresolved_pair() {
        let traj = short_sweep();
        let array = ArrayGeometry::planar_2x2(cfg().wavelength() / 2.0);
        let truth = [
            PointEstimate {
                position: Vec3::new(0.0, 0.25, 0.0),
                amplitude: Complex64::from_polar(2e-5, 0.4),
            },
            PointEstimate {
                position: Vec3::new(-0.11, 0.17, 0.0),
                amplitude: Complex64::from_polar(1.5e-5, -1.0),
            },
        ];
        let cube = two_point_cube(&truth, &traj, &array);
        let grid =
            ImageGrid::plane_xy(Vec3::new(0.0, 0.22, 0.0), 0.2, 0.1, cfg().wavelength()).unwrap();
        let settings = JointSettings {
            count: 2,
            ..JointSettings::default()
        };
        let found = detect_points(&cube, &traj, &array, &grid, &settings).unwrap();
        for t in &truth {
            let best = found
                .iter()
                .min_by(|x, y| {
                    (x.position - t.position)
                        .norm()
                        .total_cmp(&(y.position - t.position).norm())
                })
                .unwrap();
            assert!(
                (best.position - t.position).norm() < 1e-5,
                "{best:?} vs {t:?}"
            );
            assert!((best.amplitude - t.amplitude).norm() < 1e-3 * t.amplitude.norm());
        }
        let residual = subtract_points(&cube, &traj, &array, &found).unwrap();
        let left: f64 = residual.values().iter().map(|v| v.norm_sqr()).sum();
        let total: f64 = cube.values().iter().map(|v| v.norm_sqr()).sum();
        assert!(left < 1e-6 * total);
    }
}
