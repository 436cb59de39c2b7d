//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::{Error, Result};

/// `A ⊗ I₃`, with the 3-vector index running fastest.
pub fn kron_identity3(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = a.shape();
    let mut out = DMatrix::zeros(3 * r, 3 * c);
    for i in 0..r {
        for j in 0..c {
            let v = a[(i, j)];
            if v != 0.0 {
                for k in 0..3 {
                    out[(3 * i + k, 3 * j + k)] = v;
                }
            }
        }
    }
    out
}

pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Inverse of a symmetric positive-definite matrix via Cholesky after
/// diagonal equilibration, which keeps badly scaled blocks (metres vs.
/// amplitude units) well conditioned.
pub fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    if n == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    let mut d = Vec::with_capacity(n);
    for i in 0..n {
        let v = a[(i, i)];
        if !(v > 0.0) || !v.is_finite() {
            return None;
        }
        d.push(1.0 / v.sqrt());
    }
    let mut s = DMatrix::from_fn(n, n, |i, j| a[(i, j)] * d[i] * d[j]);
    symmetrize(&mut s);
    let inv = s.cholesky()?.inverse();
    let mut out = DMatrix::from_fn(n, n, |i, j| inv[(i, j)] * d[i] * d[j]);
    symmetrize(&mut out);
    Some(out)
}

/// Equilibrated Cholesky factor of an SPD matrix, reusable for solves.
pub struct SpdFactor {
    scale: Vec<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl SpdFactor {
    pub fn new(a: &DMatrix<f64>) -> Option<Self> {
        let n = a.nrows();
        let mut scale = Vec::with_capacity(n);
        for i in 0..n {
            let v = a[(i, i)];
            if !(v > 0.0) || !v.is_finite() {
                return None;
            }
            scale.push(1.0 / v.sqrt());
        }
        let mut s = DMatrix::from_fn(n, n, |i, j| a[(i, j)] * scale[i] * scale[j]);
        symmetrize(&mut s);
        Some(Self {
            scale,
            chol: s.cholesky()?,
        })
    }

    /// `A⁻¹ B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let d = &self.scale;
        let scaled = DMatrix::from_fn(b.nrows(), b.ncols(), |i, j| b[(i, j)] * d[i]);
        let x = self.chol.solve(&scaled);
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * d[i])
    }
}

/// Ratio of extreme eigenvalues of a symmetric matrix (infinite if singular).
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let ev = SymmetricEigen::new(a.clone()).eigenvalues;
    let max = ev.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// SPD inverse that adds `1e-12·max(diag)` to the diagonal when the matrix
/// is worse conditioned than `max_cond` or fails to factor.
pub fn spd_inverse_with_jitter(a: &DMatrix<f64>, max_cond: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let maxdiag = (0..n).map(|i| a[(i, i)]).fold(0.0, f64::max);
    if condition_number(a) <= max_cond {
        if let Some(inv) = spd_inverse(a) {
            return Ok(inv);
        }
    }
    let jitter = if maxdiag > 0.0 {
        1e-12 * maxdiag
    } else {
        1e-300
    };
    let mut b = a.clone();
    for i in 0..n {
        b[(i, i)] += jitter;
    }
    let mut b2 = b.clone();
    symmetrize(&mut b2);
    b2.cholesky()
        .map(|c| c.inverse())
        .ok_or(Error::NotPositiveSemidefinite("covariance inverse"))
}

/// A factor `L` with `L Lᵀ = A` for symmetric PSD `A`. Falls back to an
/// eigen-decomposition when Cholesky fails on a singular matrix.
pub fn psd_factor(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.iter().all(|&v| v == 0.0) {
        return Ok(DMatrix::zeros(n, n));
    }
    let mut s = a.clone();
    symmetrize(&mut s);
    if let Some(c) = s.clone().cholesky() {
        return Ok(c.l());
    }
    let eig = SymmetricEigen::new(s);
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let tol = 1e-10 * max.max(f64::MIN_POSITIVE);
    if eig.eigenvalues.iter().any(|&l| l < -tol) {
        return Err(Error::NotPositiveSemidefinite("covariance factor"));
    }
    let mut v = eig.eigenvectors;
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        let s = l.max(0.0).sqrt();
        v.column_mut(j).scale_mut(s);
    }
    Ok(v)
}
