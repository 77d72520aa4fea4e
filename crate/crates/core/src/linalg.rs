//! Small dense helpers for the P×P blocks used throughout.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{BlessError, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub fn cholesky(a: &Mat, context: impl FnOnce() -> String) -> Result<Cholesky<f64, Dyn>> {
    let sym = symmetrize(a);
    Cholesky::new(sym).ok_or_else(|| BlessError::not_pd(context()))
}

pub fn symmetrize(a: &Mat) -> Mat {
    (a + a.transpose()) * 0.5
}

/// ln |A| from a Cholesky factor.
pub fn chol_logdet(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn spd_inverse(a: &Mat, context: impl FnOnce() -> String) -> Result<Mat> {
    let ch = cholesky(a, context)?;
    Ok(symmetrize(&ch.inverse()))
}

pub fn spd_logdet(a: &Mat, context: impl FnOnce() -> String) -> Result<f64> {
    Ok(chol_logdet(&cholesky(a, context)?))
}

/// Multivariate log-gamma ln Γ_p(a).
pub fn mv_ln_gamma(p: usize, a: f64) -> f64 {
    let pf = p as f64;
    pf * (pf - 1.0) / 4.0 * std::f64::consts::PI.ln()
        + (0..p).map(|i| ln_gamma(a - i as f64 / 2.0)).sum::<f64>()
}

/// Multivariate digamma ψ_p(a).
pub fn mv_digamma(p: usize, a: f64) -> f64 {
    (0..p).map(|i| digamma(a - i as f64 / 2.0)).sum()
}

/// tr(A B) for symmetric A, B.
pub fn trace_product(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn mat_from_slice(p: usize, data: &[f64]) -> Mat {
    Mat::from_row_slice(p, p, data)
}

/// Row-major copy of a square matrix.
pub fn mat_to_vec(a: &Mat) -> Vec<f64> {
    let p = a.nrows();
    let mut out = Vec::with_capacity(p * p);
    for r in 0..p {
        for c in 0..p {
            out.push(a[(r, c)]);
        }
    }
    out
}

/// In-place lower Cholesky of a row-major p×p block. Returns false when the
/// block is not numerically positive definite.
pub fn chol_in_place(a: &mut [f64], p: usize) -> bool {
    for j in 0..p {
        let mut d = a[j * p + j];
        for k in 0..j {
            d -= a[j * p + k] * a[j * p + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * p + j] = d;
        for i in j + 1..p {
            let mut v = a[i * p + j];
            for k in 0..j {
                v -= a[i * p + k] * a[j * p + k];
            }
            a[i * p + j] = v / d;
        }
        for i in 0..j {
            a[i * p + j] = 0.0;
        }
    }
    true
}

/// Solve (L Lᵀ) x = b in place.
pub fn chol_solve(l: &[f64], p: usize, b: &mut [f64]) {
    for i in 0..p {
        let mut v = b[i];
        for k in 0..i {
            v -= l[i * p + k] * b[k];
        }
        b[i] = v / l[i * p + i];
    }
    for i in (0..p).rev() {
        let mut v = b[i];
        for k in i + 1..p {
            v -= l[k * p + i] * b[k];
        }
        b[i] = v / l[i * p + i];
    }
}

/// (L Lᵀ)⁻¹ written into `out` (row-major, symmetric).
pub fn chol_inverse(l: &[f64], p: usize, out: &mut [f64]) {
    let mut col = vec![0.0; p];
    for c in 0..p {
        col.iter_mut().for_each(|v| *v = 0.0);
        col[c] = 1.0;
        chol_solve(l, p, &mut col);
        for r in 0..p {
            out[r * p + c] = col[r];
        }
    }
    for r in 0..p {
        for c in r + 1..p {
            let v = 0.5 * (out[r * p + c] + out[c * p + r]);
            out[r * p + c] = v;
            out[c * p + r] = v;
        }
    }
}

pub fn chol_logdet_slice(l: &[f64], p: usize) -> f64 {
    2.0 * (0..p).map(|i| l[i * p + i].ln()).sum::<f64>()
}

/// Inverse and log-determinant of a row-major SPD block; None if not PD.
pub fn spd_inverse_slice(a: &[f64], p: usize) -> Option<(Vec<f64>, f64)> {
    let mut l = a.to_vec();
    if !chol_in_place(&mut l, p) {
        return None;
    }
    let mut inv = vec![0.0; p * p];
    chol_inverse(&l, p, &mut inv);
    Some((inv, chol_logdet_slice(&l, p)))
}

pub fn quad_form(a: &[f64], p: usize, x: &[f64]) -> f64 {
    let mut q = 0.0;
    for r in 0..p {
        let mut v = 0.0;
        for c in 0..p {
            v += a[r * p + c] * x[c];
        }
        q += x[r] * v;
    }
    q
}

pub fn mat_vec(a: &[f64], p: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..p {
        out[r] = (0..p).map(|c| a[r * p + c] * x[c]).sum();
    }
}
