//! Voxelwise bias-reduced probit regression (Jeffreys-penalized likelihood)
//! and Benjamini–Hochberg adjustment.

use rayon::prelude::*;

use crate::design::DesignPatterns;
use crate::linalg;
use crate::model::Dataset;
use crate::normal;

const MAX_ITER: usize = 200;
const MAX_HALVINGS: usize = 30;
const RIDGE: f64 = 1e-8;

/// One voxel's fit. Vectors are indexed intercept first, then covariates.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelFit {
    pub coef: Vec<f64>,
    pub se: Vec<f64>,
    pub pvalue: Vec<f64>,
    pub converged: bool,
    /// Response constant across subjects.
    pub degenerate: bool,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub struct FirthFit {
    pub p: usize,
    pub voxels: Vec<VoxelFit>,
}

impl FirthFit {
    pub fn n_voxels(&self) -> usize {
        self.voxels.len()
    }

    /// Covariate coefficient (0-based, excluding the intercept).
    pub fn beta(&self, j: usize, k: usize) -> f64 {
        self.voxels[j].coef[k + 1]
    }

    pub fn intercept(&self, j: usize) -> f64 {
        self.voxels[j].coef[0]
    }

    pub fn pvalue(&self, j: usize, k: usize) -> f64 {
        self.voxels[j].pvalue[k + 1]
    }

    pub fn tstat(&self, j: usize, k: usize) -> f64 {
        self.voxels[j].coef[k + 1] / self.voxels[j].se[k + 1]
    }

    /// Covariate-k column across voxels.
    pub fn beta_map(&self, k: usize) -> Vec<f64> {
        (0..self.n_voxels()).map(|j| self.beta(j, k)).collect()
    }

    pub fn pvalue_map(&self, k: usize) -> Vec<f64> {
        (0..self.n_voxels()).map(|j| self.pvalue(j, k)).collect()
    }
}

/// Grouped binomial data: for each distinct row (with intercept prepended),
/// the counts of ones and zeros.
struct Grouped<'a> {
    q: usize,
    rows: &'a [f64],
    ones: &'a [f64],
    zeros: &'a [f64],
}

struct Eval {
    penalized: f64,
    info: Vec<f64>,
    score: Vec<f64>,
    /// Cholesky factor of the (ridged if needed) information.
    chol: Vec<f64>,
}

impl Grouped<'_> {
    fn k(&self) -> usize {
        self.ones.len()
    }

    fn row(&self, k: usize) -> &[f64] {
        &self.rows[k * self.q..(k + 1) * self.q]
    }

    fn eta(&self, k: usize, b: &[f64]) -> f64 {
        self.row(k).iter().zip(b).map(|(x, c)| x * c).sum()
    }

    /// Penalized log-likelihood, information, modified score. None if the
    /// information stays singular after ridging.
    fn evaluate(&self, b: &[f64], want_score: bool) -> Option<Eval> {
        let q = self.q;
        let kk = self.k();
        let mut info = vec![0.0; q * q];
        let mut loglik = 0.0;
        let mut lam1 = vec![0.0; kk];
        let mut lam0 = vec![0.0; kk];
        let mut etas = vec![0.0; kk];
        let mut wts = vec![0.0; kk];
        for k in 0..kk {
            let eta = self.eta(k, b);
            let (l1, m1) = normal::ln_cdf_and_inv_mills(eta);
            let (l0, m0) = normal::ln_cdf_and_inv_mills(-eta);
            let n = self.ones[k] + self.zeros[k];
            if self.ones[k] > 0.0 {
                loglik += self.ones[k] * l1;
            }
            if self.zeros[k] > 0.0 {
                loglik += self.zeros[k] * l0;
            }
            let w = m1 * m0;
            etas[k] = eta;
            lam1[k] = m1;
            lam0[k] = m0;
            wts[k] = w;
            let x = self.row(k);
            for r in 0..q {
                for c in 0..q {
                    info[r * q + c] += n * w * x[r] * x[c];
                }
            }
        }
        let mut chol = info.clone();
        if !linalg::chol_in_place(&mut chol, q) {
            chol = info.clone();
            let scale = (0..q).map(|i| info[i * q + i]).fold(0.0f64, f64::max).max(1.0);
            for i in 0..q {
                chol[i * q + i] += RIDGE * scale;
            }
            if !linalg::chol_in_place(&mut chol, q) {
                return None;
            }
        }
        let penalized = loglik + 0.5 * linalg::chol_logdet_slice(&chol, q);
        let mut score = vec![0.0; q];
        if want_score {
            let mut tmp = vec![0.0; q];
            for k in 0..kk {
                let x = self.row(k);
                let n = self.ones[k] + self.zeros[k];
                tmp.copy_from_slice(x);
                linalg::chol_solve(&chol, q, &mut tmp);
                let lev: f64 = x.iter().zip(&tmp).map(|(a, b)| a * b).sum();
                let hat = n * wts[k] * lev;
                let dlogw = -2.0 * etas[k] - lam1[k] + lam0[k];
                let u = self.ones[k] * lam1[k] - self.zeros[k] * lam0[k] + 0.5 * hat * dlogw;
                for r in 0..q {
                    score[r] += u * x[r];
                }
            }
        }
        Some(Eval {
            penalized,
            info,
            score,
            chol,
        })
    }
}

fn fit_grouped(g: &Grouped) -> (Vec<f64>, Vec<f64>, bool, usize) {
    let q = g.q;
    let mut b = vec![0.0; q];
    let mut converged = false;
    let mut iterations = 0;
    let Some(mut cur) = g.evaluate(&b, true) else {
        return (b, vec![f64::INFINITY; q], false, 0);
    };
    for it in 0..MAX_ITER {
        iterations = it + 1;
        let mut step = cur.score.clone();
        linalg::chol_solve(&cur.chol, q, &mut step);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<f64> = b.iter().zip(&step).map(|(x, s)| x + scale * s).collect();
            if let Some(e) = g.evaluate(&trial, true) {
                if e.penalized >= cur.penalized - 1e-12 * cur.penalized.abs().max(1.0) {
                    accepted = Some((trial, e));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((trial, e)) = accepted else {
            break;
        };
        let max_step = step.iter().map(|s| (s * scale).abs()).fold(0.0, f64::max);
        b = trial;
        cur = e;
        if max_step < 1e-9 {
            converged = true;
            break;
        }
    }
    let mut inv = vec![0.0; q * q];
    let se = if linalg::chol_in_place(&mut cur.info.clone(), q) {
        let mut l = cur.info.clone();
        linalg::chol_in_place(&mut l, q);
        linalg::chol_inverse(&l, q, &mut inv);
        (0..q).map(|i| inv[i * q + i].sqrt()).collect()
    } else {
        converged = false;
        vec![f64::INFINITY; q]
    };
    if b.iter().any(|v| !v.is_finite()) {
        converged = false;
    }
    (b, se, converged, iterations)
}

fn wald_p(coef: f64, se: f64) -> f64 {
    if !se.is_finite() || !(se > 0.0) {
        return 1.0;
    }
    (2.0 * normal::cdf(-(coef / se).abs())).clamp(0.0, 1.0)
}

fn assemble(coef: Vec<f64>, se: Vec<f64>, converged: bool, iterations: usize, degenerate: bool) -> VoxelFit {
    let pvalue = coef.iter().zip(&se).map(|(c, s)| wald_p(*c, *s)).collect();
    VoxelFit {
        coef,
        se,
        pvalue,
        converged,
        degenerate,
        iterations,
    }
}

/// Fit one response vector against a design that already carries the
/// intercept column (row-major N×Q).
pub fn fit_firth_probit(y: &[u8], x_with_intercept: &[f64], q: usize) -> VoxelFit {
    let n = y.len();
    let pats = DesignPatterns::from_rows(x_with_intercept, q, n);
    let kk = pats.n_patterns();
    let mut counts = vec![0.0; 2 * kk];
    pats.voxel_counts(y, None, &mut counts);
    let rows: Vec<f64> = (0..kk).flat_map(|k| pats.row(k).to_vec()).collect();
    fit_counts(&rows, q, &counts, false)
}

fn fit_counts(rows: &[f64], q: usize, counts: &[f64], degenerate: bool) -> VoxelFit {
    let ones: Vec<f64> = counts.iter().step_by(2).copied().collect();
    let zeros: Vec<f64> = counts.iter().skip(1).step_by(2).copied().collect();
    let g = Grouped {
        q,
        rows,
        ones: &ones,
        zeros: &zeros,
    };
    let (coef, se, converged, iterations) = fit_grouped(&g);
    assemble(coef, se, converged, iterations, degenerate)
}

/// Fit every voxel. Voxels with a constant response get an intercept-only
/// fit with covariate coefficients 0 and p-values 1.
pub fn fit_all_voxels(data: &Dataset) -> FirthFit {
    let p = data.n_covariates();
    let q = p + 1;
    let pats = DesignPatterns::new(data);
    let kk = pats.n_patterns();
    let rows: Vec<f64> = (0..kk)
        .flat_map(|k| std::iter::once(1.0).chain(pats.row(k).iter().copied()))
        .collect();
    let n = data.n_subjects() as f64;
    let voxels = (0..data.n_voxels())
        .into_par_iter()
        .map(|j| {
            let y = data.y_voxel(j);
            let mut counts = vec![0.0; 2 * kk];
            pats.voxel_counts(y, None, &mut counts);
            let ones: f64 = counts.iter().step_by(2).sum();
            if ones == 0.0 || ones == n {
                let total = [ones, n - ones];
                let fit = fit_counts(&[1.0], 1, &total, true);
                let mut coef = vec![0.0; q];
                coef[0] = fit.coef[0];
                let mut se = vec![f64::INFINITY; q];
                se[0] = fit.se[0];
                let mut out = assemble(coef, se, fit.converged, fit.iterations, true);
                for v in out.pvalue.iter_mut().skip(1) {
                    *v = 1.0;
                }
                out
            } else {
                fit_counts(&rows, q, &counts, false)
            }
        })
        .collect();
    FirthFit { p, voxels }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BhResult {
    pub adjusted: Vec<f64>,
    pub rejected: Vec<bool>,
}

/// Benjamini–Hochberg step-up adjustment.
pub fn bh_fdr_adjust(pvals: &[f64], level: f64) -> BhResult {
    let m = pvals.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvals[a].total_cmp(&pvals[b]).then(a.cmp(&b)));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (0..m).rev() {
        let i = order[rank];
        let v = (pvals[i] * m as f64 / (rank + 1) as f64).min(1.0);
        running = running.min(v);
        adjusted[i] = running;
    }
    let rejected = adjusted.iter().map(|&a| a <= level).collect();
    BhResult { adjusted, rejected }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_intercept(x: &[f64]) -> Vec<f64> {
        x.iter().flat_map(|&v| [1.0, v]).collect()
    }

    #[test]
    fn separated_data_give_finite_estimates() {
        let x: Vec<f64> = (0..20).map(|i| i as f64 - 9.5).collect();
        let y: Vec<u8> = x.iter().map(|&v| (v > 0.0) as u8).collect();
        let fit = fit_firth_probit(&y, &with_intercept(&x), 2);
        assert!(fit.converged);
        assert!(fit.coef.iter().all(|c| c.is_finite()));
        assert!(fit.se.iter().all(|s| s.is_finite()));
        assert!(fit.pvalue.iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(fit.coef[1] > 0.0);
    }

    #[test]
    fn zero_covariate_is_uninformative() {
        let y: Vec<u8> = (0..30).map(|i| (i % 3 == 0) as u8).collect();
        let x = vec![0.0; 30];
        let fit = fit_firth_probit(&y, &with_intercept(&x), 2);
        assert!(fit.coef[1].abs() < 1e-6);
        assert!(fit.pvalue[1] > 0.99);
    }

    #[test]
    fn constant_voxel_is_degenerate() {
        let data = Dataset::new(4, 2, vec![0, 0, 0, 0, 1, 0, 1, 0], vec![0.0, 1.0, 0.0, 1.0], vec!["x".into()]).unwrap();
        let fit = fit_all_voxels(&data);
        assert!(fit.voxels[0].degenerate);
        assert_eq!(fit.pvalue(0, 0), 1.0);
        assert_eq!(fit.beta(0, 0), 0.0);
        assert!(fit.intercept(0).is_finite() && fit.intercept(0) < 0.0);
        assert!(!fit.voxels[1].degenerate);
    }

    #[test]
    fn bh_simple_cases() {
        let r = bh_fdr_adjust(&[0.0, 0.0, 0.0], 0.05);
        assert!(r.rejected.iter().all(|&b| b));
        let r = bh_fdr_adjust(&[0.3], 0.05);
        assert_eq!(r.adjusted, vec![0.3]);
        assert_eq!(r.rejected, vec![false]);
        let r = bh_fdr_adjust(&[0.01, 0.04, 0.03, 0.5], 0.05);
        assert_eq!(r.rejected, vec![true, false, false, false]);
        assert!((r.adjusted[1] - 0.04 * 4.0 / 3.0).abs() < 1e-15);
        assert!((r.adjusted[0] - 0.04).abs() < 1e-15);
    }
}
