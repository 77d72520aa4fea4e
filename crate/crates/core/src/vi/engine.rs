use log::{debug, warn};
use rayon::prelude::*;

use super::{Perturbation, RunStatus, ShiftMode, VariationalState};
use crate::design::DesignPatterns;
use crate::error::{BlessError, Result};
use crate::lattice::NeighborGraph;
use crate::linalg;
use crate::model::{Dataset, Hyperparams};
use crate::normal;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// λ(ξ) = tanh(ξ/2) / (4ξ), with the limit 1/8 at ξ = 0.
pub(crate) fn jj_lambda(xi: f64) -> f64 {
    if xi.abs() < 1e-6 {
        0.125 - xi * xi / 96.0
    } else {
        (0.5 * xi).tanh() / (4.0 * xi)
    }
}

fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// Expected-latent sufficient statistics of the current state, per voxel:
/// Σ w E[z] x, Σ w E[z] and Σ w ln Φ(±η̃).
#[derive(Clone, Debug)]
pub struct ZStats {
    pub zx: Vec<f64>,
    pub z0: Vec<f64>,
    pub ln_lik: Vec<f64>,
}

struct RegUpdate {
    m: Vec<f64>,
    s: Vec<f64>,
    m0: f64,
    v0: f64,
    g: Vec<f64>,
}

/// Precomputed quantities for one (data, ν0, perturbation) combination.
pub struct Engine<'a> {
    pub(crate) data: &'a Dataset,
    pub(crate) hp: &'a Hyperparams,
    pub(crate) graph: &'a NeighborGraph,
    pub(crate) nu0: f64,
    pub(crate) pert: &'a Perturbation,
    pub(crate) pats: DesignPatterns,
    /// Per voxel and pattern: weight of y = 1 and of y = 0 (M × 2K).
    pub(crate) counts: Vec<f64>,
    pub(crate) xwx: Vec<f64>,
    pub(crate) swx: Vec<f64>,
    pub(crate) sw: f64,
    scale_inv: Vec<f64>,
    scale_inv_logdet: f64,
}

impl<'a> Engine<'a> {
    pub fn new(
        data: &'a Dataset,
        hp: &'a Hyperparams,
        graph: &'a NeighborGraph,
        nu0: f64,
        pert: &'a Perturbation,
    ) -> Result<Self> {
        let (n, m, p) = (data.n_subjects(), data.n_voxels(), data.n_covariates());
        if p == 0 {
            return Err(BlessError::Dimension("at least one covariate is required".into()));
        }
        if hp.p() != p {
            return Err(BlessError::Dimension(format!(
                "hyperparameters are for P = {}, data has P = {p}",
                hp.p()
            )));
        }
        if graph.n_voxels() != m {
            return Err(BlessError::Dimension(format!(
                "graph has {} voxels, data has {m}",
                graph.n_voxels()
            )));
        }
        if !(nu0 > 0.0) || nu0 > hp.nu1 {
            return Err(BlessError::Config(format!(
                "spike variance {nu0} must lie in (0, nu1]"
            )));
        }
        pert.validate(n, m, p)?;
        let pats = DesignPatterns::new(data);
        let kk = pats.n_patterns();
        let mut counts = vec![0.0; m * 2 * kk];
        counts
            .par_chunks_mut(2 * kk)
            .enumerate()
            .for_each(|(j, c)| pats.voxel_counts(data.y_voxel(j), Some(&pert.weights), c));
        let pw = pats.pattern_weights(Some(&pert.weights));
        let mut xwx = vec![0.0; p * p];
        let mut swx = vec![0.0; p];
        let mut sw = 0.0;
        for (k, &w) in pw.iter().enumerate() {
            let x = pats.row(k);
            sw += w;
            for r in 0..p {
                swx[r] += w * x[r];
                for c in 0..p {
                    xwx[r * p + c] += w * x[r] * x[c];
                }
            }
        }
        let scale_inv = linalg::mat_to_vec(&hp.wishart_scale_inv);
        let (_, scale_inv_logdet) = linalg::spd_inverse_slice(&scale_inv, p)
            .ok_or_else(|| BlessError::not_pd("Wishart scale"))?;
        Ok(Engine {
            data,
            hp,
            graph,
            nu0,
            pert,
            pats,
            counts,
            xwx,
            swx,
            sw,
            scale_inv,
            scale_inv_logdet,
        })
    }

    fn p(&self) -> usize {
        self.data.n_covariates()
    }

    fn m(&self) -> usize {
        self.data.n_voxels()
    }

    pub(crate) fn voxel_counts(&self, j: usize) -> &[f64] {
        let kk2 = 2 * self.pats.n_patterns();
        &self.counts[j * kk2..(j + 1) * kk2]
    }

    fn shift(&self, j: usize, k: usize) -> f64 {
        self.pert.shifts[j * self.p() + k]
    }

    /// Rank of the MCAR precision, M − G.
    pub(crate) fn mcar_rank(&self) -> f64 {
        (self.m() - self.graph.n_components()) as f64
    }

    pub(crate) fn posterior_df(&self) -> f64 {
        self.hp.wishart_df + self.mcar_rank()
    }

    fn voxel_z(&self, j: usize, m: &[f64], m0: f64, zx: &mut [f64]) -> (f64, f64) {
        let c = self.voxel_counts(j);
        let mut z0 = 0.0;
        let mut ln = 0.0;
        zx.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..self.pats.n_patterns() {
            let x = self.pats.row(k);
            let a = x.iter().zip(m).map(|(u, v)| u * v).sum::<f64>() + m0;
            let (w1, w0) = (c[2 * k], c[2 * k + 1]);
            let mut t = 0.0;
            if w1 > 0.0 {
                let (l, r) = normal::ln_cdf_and_inv_mills(a);
                ln += w1 * l;
                t += w1 * (a + r);
            }
            if w0 > 0.0 {
                let (l, r) = normal::ln_cdf_and_inv_mills(-a);
                ln += w0 * l;
                t += w0 * (a - r);
            }
            z0 += t;
            for (acc, xv) in zx.iter_mut().zip(x) {
                *acc += t * xv;
            }
        }
        (z0, ln)
    }

    pub fn z_stats(&self, vs: &VariationalState) -> ZStats {
        let (m, p) = (self.m(), self.p());
        let mut zx = vec![0.0; m * p];
        let mut z0 = vec![0.0; m];
        let mut ln_lik = vec![0.0; m];
        zx.par_chunks_mut(p)
            .zip(z0.par_iter_mut())
            .zip(ln_lik.par_iter_mut())
            .enumerate()
            .for_each(|(j, ((zxj, z0j), lnj))| {
                let (a, b) = self.voxel_z(j, vs.beta(j), vs.m_beta0[j], zxj);
                *z0j = a;
                *lnj = b;
            });
        ZStats { zx, z0, ln_lik }
    }

    fn update_regression(&self, vs: &VariationalState, z: &ZStats, j: usize) -> Result<RegUpdate> {
        let p = self.p();
        let (nu0, nu1) = (self.nu0, self.hp.nu1);
        let g_old = vs.gamma(j);
        let mut a = self.xwx.clone();
        let mut rhs: Vec<f64> = (0..p)
            .map(|k| z.zx[j * p + k] - vs.m_beta0[j] * self.swx[k])
            .collect();
        for k in 0..p {
            let g = g_old[k];
            let d = g / nu1 + (1.0 - g) / nu0;
            a[k * p + k] += d;
            let mu = self.shift(j, k);
            rhs[k] += match self.pert.mode {
                ShiftMode::Both => d * mu,
                ShiftMode::SpikeOnly => (1.0 - g) / nu0 * mu,
            };
        }
        let mut l = a;
        if !linalg::chol_in_place(&mut l, p) {
            return Err(BlessError::not_pd(format!("coefficient block at voxel {j}")));
        }
        let mut s = vec![0.0; p * p];
        linalg::chol_inverse(&l, p, &mut s);
        let mut m = rhs;
        linalg::chol_solve(&l, p, &mut m);

        let prec0 = self.sw + 1.0 / self.hp.sigma0_sq;
        let cross: f64 = self.swx.iter().zip(&m).map(|(a, b)| a * b).sum();
        let m0 = (z.z0[j] - cross) / prec0;
        let v0 = 1.0 / prec0;

        let half_log_ratio = 0.5 * (nu0 / nu1).ln();
        let theta = vs.theta(j);
        let g = (0..p)
            .map(|k| {
                let mu = self.shift(j, k);
                let skk = s[k * p + k];
                let e_shift = (m[k] - mu).powi(2) + skk;
                let logit = theta[k]
                    + half_log_ratio
                    + match self.pert.mode {
                        ShiftMode::Both => e_shift * (0.5 / nu0 - 0.5 / nu1),
                        ShiftMode::SpikeOnly => 0.5 * e_shift / nu0 - 0.5 * (m[k] * m[k] + skk) / nu1,
                    };
                normal::sigmoid(logit)
            })
            .collect();
        Ok(RegUpdate { m, s, m0, v0, g })
    }

    fn update_theta(&self, vs: &VariationalState, omega: &[f64], j: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let p = self.p();
        let nj = self.graph.degree(j) as f64;
        let mut lam: Vec<f64> = omega.iter().map(|v| v * nj).collect();
        let xi = &vs.xi[j * p..(j + 1) * p];
        for k in 0..p {
            lam[k * p + k] += 2.0 * jj_lambda(xi[k]);
        }
        let mut nsum = vec![0.0; p];
        for &r in self.graph.neighbors(j) {
            for k in 0..p {
                nsum[k] += vs.m_theta[r * p + k];
            }
        }
        let mut rhs = vec![0.0; p];
        linalg::mat_vec(omega, p, &nsum, &mut rhs);
        let g = vs.gamma(j);
        for k in 0..p {
            rhs[k] += g[k] - 0.5;
        }
        if !linalg::chol_in_place(&mut lam, p) {
            return Err(BlessError::not_pd(format!("sparsity block at voxel {j}")));
        }
        let mut st = vec![0.0; p * p];
        linalg::chol_inverse(&lam, p, &mut st);
        linalg::chol_solve(&lam, p, &mut rhs);
        let new_xi = (0..p).map(|k| (rhs[k] * rhs[k] + st[k * p + k]).sqrt()).collect();
        Ok((rhs, st, new_xi))
    }

    /// Σ over unordered neighbour pairs of E[(θ_j − θ_r)(θ_j − θ_r)ᵀ].
    pub(crate) fn pair_scatter(&self, vs: &VariationalState) -> Vec<f64> {
        let p = self.p();
        let pp = p * p;
        let mut s = vec![0.0; pp];
        let mut d = vec![0.0; p];
        for (j, r) in self.graph.edges() {
            for k in 0..p {
                d[k] = vs.m_theta[j * p + k] - vs.m_theta[r * p + k];
            }
            for a in 0..p {
                for b in 0..p {
                    s[a * p + b] += d[a] * d[b]
                        + vs.s_theta[j * pp + a * p + b]
                        + vs.s_theta[r * pp + a * p + b];
                }
            }
        }
        s
    }

    /// One full cycle: regression factors, sparsity field by colour, precision.
    pub fn sweep(&self, vs: &mut VariationalState, z: &ZStats) -> Result<()> {
        let (m, p) = (self.m(), self.p());
        let pp = p * p;
        let updates: Vec<RegUpdate> = (0..m)
            .into_par_iter()
            .map(|j| self.update_regression(vs, z, j))
            .collect::<Result<_>>()?;
        for (j, u) in updates.into_iter().enumerate() {
            vs.m_beta[j * p..(j + 1) * p].copy_from_slice(&u.m);
            vs.s_beta[j * pp..(j + 1) * pp].copy_from_slice(&u.s);
            vs.m_beta0[j] = u.m0;
            vs.v_beta0[j] = u.v0;
            vs.q_gamma[j * p..(j + 1) * p].copy_from_slice(&u.g);
        }

        let omega = vs.expected_precision();
        for colour in 0..2u8 {
            let class = self.graph.color_class(colour);
            let results: Vec<_> = class
                .par_iter()
                .map(|&j| self.update_theta(vs, &omega, j))
                .collect::<Result<_>>()?;
            for (&j, (mt, st, xi)) in class.iter().zip(results) {
                vs.m_theta[j * p..(j + 1) * p].copy_from_slice(&mt);
                vs.s_theta[j * pp..(j + 1) * pp].copy_from_slice(&st);
                vs.xi[j * p..(j + 1) * p].copy_from_slice(&xi);
            }
        }

        let pairs = self.pair_scatter(vs);
        let post_inv: Vec<f64> = self.scale_inv.iter().zip(&pairs).map(|(a, b)| a + b).collect();
        let (scale, _) = linalg::spd_inverse_slice(&post_inv, p)
            .ok_or_else(|| BlessError::not_pd("precision update"))?;
        vs.wishart_scale = scale;
        vs.wishart_df = self.posterior_df();
        Ok(())
    }

    fn regression_terms(&self, vs: &VariationalState, j: usize) -> Result<f64> {
        let p = self.p();
        let (nu0, nu1) = (self.nu0, self.hp.nu1);
        let s = vs.beta_cov(j);
        let m = vs.beta(j);
        let g = vs.gamma(j);
        let (_, ld) = linalg::spd_inverse_slice(s, p)
            .ok_or_else(|| BlessError::not_pd(format!("coefficient covariance at voxel {j}")))?;
        let mut total = 0.5 * (p as f64 * (1.0 + LN_2PI) + ld);
        for k in 0..p {
            let mu = self.shift(j, k);
            let skk = s[k * p + k];
            let e_shift = (m[k] - mu).powi(2) + skk;
            let log_var = g[k] * nu1.ln() + (1.0 - g[k]) * nu0.ln();
            let quad = match self.pert.mode {
                ShiftMode::Both => (g[k] / nu1 + (1.0 - g[k]) / nu0) * e_shift,
                ShiftMode::SpikeOnly => (1.0 - g[k]) / nu0 * e_shift + g[k] / nu1 * (m[k] * m[k] + skk),
            };
            total += -0.5 * LN_2PI - 0.5 * log_var - 0.5 * quad;
        }
        let (m0, v0, s0) = (vs.m_beta0[j], vs.v_beta0[j], self.hp.sigma0_sq);
        total += -0.5 * LN_2PI - 0.5 * s0.ln() - 0.5 * (m0 * m0 + v0) / s0;
        total += 0.5 * (1.0 + LN_2PI + v0.ln());
        Ok(total)
    }

    fn sparsity_terms(&self, vs: &VariationalState, j: usize) -> Result<f64> {
        let p = self.p();
        let pp = p * p;
        let st = &vs.s_theta[j * pp..(j + 1) * pp];
        let (_, ld) = linalg::spd_inverse_slice(st, p)
            .ok_or_else(|| BlessError::not_pd(format!("sparsity covariance at voxel {j}")))?;
        let mut total = 0.5 * (p as f64 * (1.0 + LN_2PI) + ld);
        for k in 0..p {
            let g = vs.q_gamma[j * p + k];
            let mt = vs.m_theta[j * p + k];
            let xi = vs.xi[j * p + k];
            let e2 = mt * mt + st[k * p + k];
            total += (g - 0.5) * mt + normal::ln_sigmoid(xi) - 0.5 * xi - jj_lambda(xi) * (e2 - xi * xi);
            total -= xlogx(g) + xlogx(1.0 - g);
        }
        Ok(total)
    }

    fn precision_terms(&self, vs: &VariationalState) -> Result<f64> {
        let p = self.p();
        let pf = p as f64;
        let df = vs.wishart_df;
        let nu = self.hp.wishart_df;
        let (_, ld_w) = linalg::spd_inverse_slice(&vs.wishart_scale, p)
            .ok_or_else(|| BlessError::not_pd("precision scale"))?;
        let e_logdet = linalg::mv_digamma(p, df / 2.0) + pf * std::f64::consts::LN_2 + ld_w;
        let omega = vs.expected_precision();
        let pairs = self.pair_scatter(vs);
        let tr_pairs: f64 = omega.iter().zip(&pairs).map(|(a, b)| a * b).sum();
        let tr_prior: f64 = omega.iter().zip(&self.scale_inv).map(|(a, b)| a * b).sum();
        let ln2 = std::f64::consts::LN_2;
        let mcar = -0.5 * tr_pairs + 0.5 * self.mcar_rank() * e_logdet;
        let prior = 0.5 * (nu - pf - 1.0) * e_logdet - 0.5 * tr_prior - 0.5 * nu * pf * ln2
            + 0.5 * nu * self.scale_inv_logdet
            - linalg::mv_ln_gamma(p, nu / 2.0);
        let entropy = 0.5 * (pf + 1.0) * ld_w + 0.5 * pf * (pf + 1.0) * ln2
            + linalg::mv_ln_gamma(p, df / 2.0)
            - 0.5 * (df - pf - 1.0) * linalg::mv_digamma(p, df / 2.0)
            + 0.5 * df * pf;
        Ok(mcar + prior + entropy)
    }

    fn z_quadratic(&self, vs: &VariationalState, j: usize) -> f64 {
        let tr: f64 = vs.beta_cov(j).iter().zip(&self.xwx).map(|(a, b)| a * b).sum();
        -0.5 * tr - 0.5 * vs.v_beta0[j] * self.sw
    }

    fn elbo_with(&self, vs: &VariationalState, z_term: impl Fn(usize) -> f64 + Sync) -> Result<f64> {
        let per_voxel: Vec<f64> = (0..self.m())
            .into_par_iter()
            .map(|j| {
                Ok(z_term(j)
                    + self.z_quadratic(vs, j)
                    + self.regression_terms(vs, j)?
                    + self.sparsity_terms(vs, j)?)
            })
            .collect::<Result<_>>()?;
        Ok(per_voxel.iter().sum::<f64>() + self.precision_terms(vs)?)
    }

    /// ELBO split into (likelihood, coefficient, sparsity, precision) parts.
    pub fn elbo_parts(&self, vs: &VariationalState, z: &ZStats) -> Result<[f64; 4]> {
        let mut parts = [0.0; 4];
        for j in 0..self.m() {
            parts[0] += z.ln_lik[j] + self.z_quadratic(vs, j);
            parts[1] += self.regression_terms(vs, j)?;
            parts[2] += self.sparsity_terms(vs, j)?;
        }
        parts[3] = self.precision_terms(vs)?;
        Ok(parts)
    }

    pub fn elbo(&self, vs: &VariationalState, z: &ZStats) -> Result<f64> {
        self.elbo_with(vs, |j| z.ln_lik[j])
    }

    /// ELBO with q(z) held at the truncated normals located by `anchor`
    /// instead of the optimal ones for `vs`.
    pub fn elbo_anchored(&self, vs: &VariationalState, anchor: &VariationalState) -> Result<f64> {
        let p = self.p();
        self.elbo_with(vs, |j| {
            let c = self.voxel_counts(j);
            let mut total = 0.0;
            for k in 0..self.pats.n_patterns() {
                let x = self.pats.row(k);
                let dot = |b: &[f64]| x.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
                let ah = dot(anchor.beta(j)) + anchor.m_beta0[j];
                let eta = dot(&vs.m_beta[j * p..(j + 1) * p]) + vs.m_beta0[j];
                let (w1, w0) = (c[2 * k], c[2 * k + 1]);
                if w1 > 0.0 {
                    let (l, r) = normal::ln_cdf_and_inv_mills(ah);
                    let mz = ah + r;
                    total += w1 * (l - 0.5 * (ah - eta) * (2.0 * mz - ah - eta));
                }
                if w0 > 0.0 {
                    let (l, r) = normal::ln_cdf_and_inv_mills(-ah);
                    let mz = ah - r;
                    total += w0 * (l - 0.5 * (ah - eta) * (2.0 * mz - ah - eta));
                }
            }
            total
        })
    }

    /// Iterate sweeps until the relative ELBO change drops below ε or the
    /// sweep budget is spent.
    pub fn run(&self, mut vs: VariationalState) -> Result<VariationalState> {
        vs.check_shape(self.m(), self.p())?;
        let mut z = self.z_stats(&vs);
        let mut elbo = self.elbo(&vs, &z)?;
        if !elbo.is_finite() {
            return Err(BlessError::Numeric("initial ELBO is not finite".into()));
        }
        vs.elbo_trace = vec![elbo];
        vs.status = RunStatus::MaxSweepsReached;
        for sweep in 1..=self.hp.max_sweeps {
            self.sweep(&mut vs, &z)?;
            z = self.z_stats(&vs);
            let next = self.elbo(&vs, &z)?;
            if !next.is_finite() {
                return Err(BlessError::Numeric(format!("ELBO is not finite after sweep {sweep}")));
            }
            if next < elbo - 1e-8 * elbo.abs() {
                warn!("ELBO decreased at sweep {sweep}: {elbo} -> {next}");
            }
            vs.elbo_trace.push(next);
            let delta = (next - elbo).abs();
            elbo = next;
            if delta < self.hp.epsilon * elbo.abs().max(f64::MIN_POSITIVE) {
                vs.status = RunStatus::Converged;
                break;
            }
        }
        debug!(
            "cavi at nu0 = {:.3e}: {} sweeps, {}, ELBO {:.6}",
            self.nu0,
            vs.sweeps(),
            vs.status.as_str(),
            elbo
        );
        Ok(vs)
    }
}

/// One update cycle applied to a copy of `vs`.
pub fn cavi_sweep(
    vs: &VariationalState,
    data: &Dataset,
    hp: &Hyperparams,
    graph: &NeighborGraph,
    nu0: f64,
    pert: &Perturbation,
) -> Result<VariationalState> {
    let eng = Engine::new(data, hp, graph, nu0, pert)?;
    vs.check_shape(data.n_voxels(), data.n_covariates())?;
    let mut out = vs.clone();
    let z = eng.z_stats(&out);
    eng.sweep(&mut out, &z)?;
    Ok(out)
}

pub fn compute_elbo(
    vs: &VariationalState,
    data: &Dataset,
    hp: &Hyperparams,
    graph: &NeighborGraph,
    nu0: f64,
    pert: &Perturbation,
) -> Result<f64> {
    let eng = Engine::new(data, hp, graph, nu0, pert)?;
    vs.check_shape(data.n_voxels(), data.n_covariates())?;
    eng.elbo(vs, &eng.z_stats(vs))
}

pub fn compute_elbo_anchored(
    vs: &VariationalState,
    anchor: &VariationalState,
    data: &Dataset,
    hp: &Hyperparams,
    graph: &NeighborGraph,
    nu0: f64,
    pert: &Perturbation,
) -> Result<f64> {
    let eng = Engine::new(data, hp, graph, nu0, pert)?;
    vs.check_shape(data.n_voxels(), data.n_covariates())?;
    eng.elbo_anchored(vs, anchor)
}

pub fn run_cavi(
    init: VariationalState,
    data: &Dataset,
    hp: &Hyperparams,
    graph: &NeighborGraph,
    nu0: f64,
    pert: &Perturbation,
) -> Result<VariationalState> {
    Engine::new(data, hp, graph, nu0, pert)?.run(init)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_graph, LatticeMask};
    use crate::linalg::Mat;
    use crate::vi::init_from_fraction;
    use statrs::distribution::{Continuous, ContinuousCDF, Normal};

    #[test]
    fn jj_lambda_limit() {
        assert_eq!(jj_lambda(0.0), 0.125);
        assert!((jj_lambda(1e-7) - 0.125).abs() < 1e-14);
        assert!((jj_lambda(2.0) - (1f64).tanh() / 8.0).abs() < 1e-15);
        assert!((jj_lambda(1e-6 * 1.0001) - jj_lambda(0.99999e-6)).abs() < 1e-12);
    }

    /// N subjects, M voxels in a line, P = 2 covariates with a few distinct rows.
    fn line_data(n: usize, m: usize) -> (Dataset, NeighborGraph) {
        let x: Vec<f64> = (0..n).flat_map(|i| [(i % 2) as f64, ((i / 2) % 3) as f64 - 1.0]).collect();
        let y: Vec<u8> = (0..m)
            .flat_map(|j| (0..n).map(move |i| ((i * 5 + j * 3 + i / 3) % 7 < 3) as u8))
            .collect();
        let data = Dataset::new(n, m, y, x, vec!["a".into(), "b".into()]).unwrap();
        let graph = build_graph(&LatticeMask::full(&[m, 1]).unwrap()).unwrap();
        (data, graph)
    }

    /// A state away from the defaults so every term of the update matters.
    fn scrambled_state(m: usize, hp: &Hyperparams, graph: &NeighborGraph) -> VariationalState {
        let mut vs = init_from_fraction(m, 2, hp, graph, &[0.3, 0.6]);
        for j in 0..m {
            let f = j as f64;
            vs.m_beta[2 * j] = 0.4 - 0.3 * f;
            vs.m_beta[2 * j + 1] = -0.2 + 0.1 * f;
            vs.m_beta0[j] = -0.5 + 0.2 * f;
            vs.q_gamma[2 * j] = 0.3 + 0.2 * f;
            vs.q_gamma[2 * j + 1] = 0.8 - 0.1 * f;
            vs.m_theta[2 * j] = 0.7 - 0.4 * f;
            vs.m_theta[2 * j + 1] = -0.3 + 0.25 * f;
            vs.xi[2 * j] = 1.3 + 0.1 * f;
            vs.xi[2 * j + 1] = 0.4;
        }
        vs.wishart_scale = vec![0.6, 0.1, 0.1, 0.3];
        vs.wishart_df = 3.5;
        vs
    }

    fn scrambled_pert(n: usize, m: usize) -> Perturbation {
        let raw: Vec<f64> = (0..n).map(|i| 0.5 + ((i * 7) % 5) as f64 * 0.3).collect();
        let total: f64 = raw.iter().sum();
        Perturbation {
            weights: raw.iter().map(|w| w * n as f64 / total).collect(),
            shifts: (0..m * 2).map(|c| 0.01 * (c as f64 - 1.5)).collect(),
            mode: ShiftMode::Both,
        }
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// One sweep recomputed subject by subject from the update equations.
    fn oracle_sweep(
        vs: &VariationalState,
        data: &Dataset,
        hp: &Hyperparams,
        nu0: f64,
        pert: &Perturbation,
    ) -> VariationalState {
        let std = Normal::new(0.0, 1.0).unwrap();
        let (n, m, p) = (data.n_subjects(), data.n_voxels(), 2);
        let nu1 = hp.nu1;
        let mut out = vs.clone();
        let w = &pert.weights;
        for j in 0..m {
            let y = data.y_voxel(j);
            let mut xtwx = Mat::zeros(p, p);
            let mut rhs = nalgebra::DVector::zeros(p);
            let mut ez = vec![0.0; n];
            for i in 0..n {
                let x = data.x_row(i);
                let eta = x[0] * vs.m_beta[j * p] + x[1] * vs.m_beta[j * p + 1] + vs.m_beta0[j];
                ez[i] = if y[i] == 1 {
                    eta + std.pdf(eta) / std.cdf(eta)
                } else {
                    eta - std.pdf(eta) / std.cdf(-eta)
                };
                for a in 0..p {
                    rhs[a] += w[i] * x[a] * (ez[i] - vs.m_beta0[j]);
                    for b in 0..p {
                        xtwx[(a, b)] += w[i] * x[a] * x[b];
                    }
                }
            }
            for k in 0..p {
                let g = vs.q_gamma[j * p + k];
                let d = g / nu1 + (1.0 - g) / nu0;
                xtwx[(k, k)] += d;
                rhs[k] += d * pert.shifts[j * p + k];
            }
            let s = xtwx.try_inverse().unwrap();
            let mb = &s * rhs;
            let sw: f64 = w.iter().sum();
            let num: f64 = (0..n)
                .map(|i| {
                    let x = data.x_row(i);
                    w[i] * (ez[i] - x[0] * mb[0] - x[1] * mb[1])
                })
                .sum();
            out.m_beta0[j] = num / (sw + 1.0 / hp.sigma0_sq);
            out.v_beta0[j] = 1.0 / (sw + 1.0 / hp.sigma0_sq);
            for k in 0..p {
                out.m_beta[j * p + k] = mb[k];
                for c in 0..p {
                    out.s_beta[j * p * p + k * p + c] = s[(k, c)];
                }
                let e = (mb[k] - pert.shifts[j * p + k]).powi(2) + s[(k, k)];
                let logit = vs.m_theta[j * p + k] + 0.5 * (nu0 / nu1).ln() + 0.5 * e * (1.0 / nu0 - 1.0 / nu1);
                out.q_gamma[j * p + k] = sigmoid(logit);
            }
        }
        // θ: even voxels first, then odd ones with their updated neighbours.
        let omega = Mat::from_row_slice(p, p, &vs.wishart_scale) * vs.wishart_df;
        for parity in 0..2 {
            for j in (parity..m).step_by(2) {
                let nbrs: Vec<usize> = [j.wrapping_sub(1), j + 1].into_iter().filter(|&r| r < m).collect();
                let mut prec = &omega * nbrs.len() as f64;
                let mut sum = nalgebra::DVector::zeros(p);
                for &r in &nbrs {
                    sum[0] += out.m_theta[r * p];
                    sum[1] += out.m_theta[r * p + 1];
                }
                let mut rhs = &omega * sum;
                for k in 0..p {
                    let xi = vs.xi[j * p + k];
                    prec[(k, k)] += 2.0 * (0.5 * xi).tanh() / (4.0 * xi);
                    rhs[k] += out.q_gamma[j * p + k] - 0.5;
                }
                let st = prec.try_inverse().unwrap();
                let mt = &st * rhs;
                for k in 0..p {
                    out.m_theta[j * p + k] = mt[k];
                    out.xi[j * p + k] = (mt[k] * mt[k] + st[(k, k)]).sqrt();
                    for c in 0..p {
                        out.s_theta[j * p * p + k * p + c] = st[(k, c)];
                    }
                }
            }
        }
        let mut post = hp.wishart_scale_inv.clone();
        for j in 0..m - 1 {
            for a in 0..p {
                for b in 0..p {
                    let da = out.m_theta[j * p + a] - out.m_theta[(j + 1) * p + a];
                    let db = out.m_theta[j * p + b] - out.m_theta[(j + 1) * p + b];
                    post[(a, b)] += da * db + out.s_theta[j * p * p + a * p + b] + out.s_theta[(j + 1) * p * p + a * p + b];
                }
            }
        }
        let scale = post.try_inverse().unwrap();
        out.wishart_scale = scale.iter().copied().collect::<Vec<_>>();
        // nalgebra iterates column-major; the matrix is symmetric.
        out.wishart_df = hp.wishart_df + (m - 1) as f64;
        out
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
        assert_eq!(a.len(), b.len(), "{what}");
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{what}[{i}]: {x} vs {y}");
        }
    }

    #[test]
    fn sweep_matches_subject_level_oracle() {
        let (data, graph) = line_data(23, 3);
        let hp = Hyperparams::new(2);
        let nu0 = 0.05;
        let pert = scrambled_pert(23, 3);
        let vs = scrambled_state(3, &hp, &graph);
        let got = cavi_sweep(&vs, &data, &hp, &graph, nu0, &pert).unwrap();
        let want = oracle_sweep(&vs, &data, &hp, nu0, &pert);
        assert_close(&got.m_beta, &want.m_beta, 1e-10, "m_beta");
        assert_close(&got.s_beta, &want.s_beta, 1e-10, "s_beta");
        assert_close(&got.m_beta0, &want.m_beta0, 1e-10, "m_beta0");
        assert_close(&got.v_beta0, &want.v_beta0, 1e-12, "v_beta0");
        assert_close(&got.q_gamma, &want.q_gamma, 1e-10, "q_gamma");
        assert_close(&got.m_theta, &want.m_theta, 1e-10, "m_theta");
        assert_close(&got.s_theta, &want.s_theta, 1e-10, "s_theta");
        assert_close(&got.xi, &want.xi, 1e-10, "xi");
        assert_close(&got.wishart_scale, &want.wishart_scale, 1e-10, "wishart_scale");
        assert_eq!(got.wishart_df, want.wishart_df);
    }

    #[test]
    fn expected_latent_at_zero_predictor() {
        let (data, graph) = line_data(10, 2);
        let hp = Hyperparams::new(2);
        let pert = Perturbation::none(10, 2, 2);
        let eng = Engine::new(&data, &hp, &graph, 0.01, &pert).unwrap();
        let mut vs = init_from_fraction(2, 2, &hp, &graph, &[0.5, 0.5]);
        vs.m_beta0 = vec![0.0; 2];
        let z = eng.z_stats(&vs);
        let c = (2.0 / std::f64::consts::PI).sqrt();
        for j in 0..2 {
            let ones = data.y_voxel(j).iter().filter(|&&v| v == 1).count() as f64;
            assert!((z.z0[j] - c * (2.0 * ones - 10.0)).abs() < 1e-12);
            assert!((z.ln_lik[j] - 10.0 * 0.5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_variances_make_inclusion_the_prior_odds() {
        let (data, graph) = line_data(12, 2);
        let mut hp = Hyperparams::new(2);
        hp.nu0_sequence = vec![hp.nu1];
        let pert = Perturbation::none(12, 2, 2);
        let vs = scrambled_state(2, &hp, &graph);
        let out = cavi_sweep(&vs, &data, &hp, &graph, hp.nu1, &pert).unwrap();
        for (g, th) in out.q_gamma.iter().zip(&vs.m_theta) {
            assert!((g - sigmoid(*th)).abs() < 1e-14);
        }
    }

    #[test]
    fn duplicate_subjects_share_weight() {
        // Subjects 0 and 2 have the same row and responses, so only their total weight matters.
        let n = 4;
        let x = vec![1.0, 0.0, 1.0, 2.0];
        let y = vec![1, 0, 1, 0, 1, 1, 1, 1];
        let data = Dataset::new(n, 2, y, x, vec!["a".into()]).unwrap();
        let graph = build_graph(&LatticeMask::full(&[2, 1]).unwrap()).unwrap();
        let hp = Hyperparams::new(1);
        let vs = init_from_fraction(2, 1, &hp, &graph, &[0.4]);
        let mut a = Perturbation::none(n, 2, 1);
        a.weights = vec![1.5, 1.0, 0.5, 1.0];
        let mut b = a.clone();
        b.weights = vec![0.2, 1.0, 1.8, 1.0];
        let ra = run_cavi(vs.clone(), &data, &hp, &graph, 0.01, &a).unwrap();
        let rb = run_cavi(vs, &data, &hp, &graph, 0.01, &b).unwrap();
        assert_close(&ra.m_beta, &rb.m_beta, 1e-12, "m_beta");
        assert_close(&ra.elbo_trace, &rb.elbo_trace, 1e-12, "elbo");
    }

    #[test]
    fn anchored_bound_equals_elbo_at_its_anchor() {
        let (data, graph) = line_data(15, 3);
        let hp = Hyperparams::new(2);
        let pert = scrambled_pert(15, 3);
        let vs = scrambled_state(3, &hp, &graph);
        let eng = Engine::new(&data, &hp, &graph, 0.02, &pert).unwrap();
        let a = eng.elbo_anchored(&vs, &vs).unwrap();
        let b = eng.elbo(&vs, &eng.z_stats(&vs)).unwrap();
        assert!((a - b).abs() < 1e-9 * b.abs(), "{a} vs {b}");
    }

    fn grad(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-5 * (1.0 + x.abs());
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    /// Each block update is a stationary point of the bound with the other
    /// blocks (and q(z)) held where the update saw them.
    #[test]
    fn block_updates_are_stationary_points() {
        let (data, graph) = line_data(17, 1);
        let hp = Hyperparams::new(2);
        let nu0 = 0.03;
        let pert = scrambled_pert(17, 1);
        let vs0 = scrambled_state(1, &hp, &graph);
        let eng = Engine::new(&data, &hp, &graph, nu0, &pert).unwrap();
        let u = cavi_sweep(&vs0, &data, &hp, &graph, nu0, &pert).unwrap();

        // Control: the starting point is not itself stationary.
        let g0 = grad(
            |v| {
                let mut t = vs0.clone();
                t.m_beta[0] = v;
                eng.elbo_anchored(&t, &vs0).unwrap()
            },
            vs0.m_beta[0],
        );
        assert!(g0.abs() > 1e-2, "control gradient {g0}");

        let mut s1 = vs0.clone();
        s1.m_beta = u.m_beta.clone();
        s1.s_beta = u.s_beta.clone();
        for k in 0..2 {
            let g = grad(
                |v| {
                    let mut t = s1.clone();
                    t.m_beta[k] = v;
                    eng.elbo_anchored(&t, &vs0).unwrap()
                },
                s1.m_beta[k],
            );
            assert!(g.abs() < 1e-5, "d/dm_beta[{k}] = {g}");
        }
        let g = grad(
            |v| {
                let mut t = s1.clone();
                t.s_beta[0] = v;
                eng.elbo_anchored(&t, &vs0).unwrap()
            },
            s1.s_beta[0],
        );
        assert!(g.abs() < 1e-4, "d/dS = {g}");

        let mut s2 = s1.clone();
        s2.m_beta0 = u.m_beta0.clone();
        s2.v_beta0 = u.v_beta0.clone();
        for (name, gv) in [
            ("m_beta0", grad(|v| { let mut t = s2.clone(); t.m_beta0[0] = v; eng.elbo_anchored(&t, &vs0).unwrap() }, s2.m_beta0[0])),
            ("v_beta0", grad(|v| { let mut t = s2.clone(); t.v_beta0[0] = v; eng.elbo_anchored(&t, &vs0).unwrap() }, s2.v_beta0[0])),
        ] {
            assert!(gv.abs() < 1e-4, "d/d{name} = {gv}");
        }

        let mut s3 = s1.clone();
        s3.q_gamma = u.q_gamma.clone();
        for k in 0..2 {
            let g = grad(
                |v| {
                    let mut t = s3.clone();
                    t.q_gamma[k] = v;
                    eng.elbo(&t, &eng.z_stats(&t)).unwrap()
                },
                s3.q_gamma[k],
            );
            assert!(g.abs() < 1e-4, "d/dq_gamma[{k}] = {g}");
        }

        let mut s4 = s3.clone();
        s4.m_theta = u.m_theta.clone();
        s4.s_theta = u.s_theta.clone();
        for k in 0..2 {
            let g = grad(
                |v| {
                    let mut t = s4.clone();
                    t.m_theta[k] = v;
                    eng.elbo(&t, &eng.z_stats(&t)).unwrap()
                },
                s4.m_theta[k],
            );
            assert!(g.abs() < 1e-5, "d/dm_theta[{k}] = {g}");
        }
    }

    #[test]
    fn huge_tolerance_stops_after_one_sweep() {
        let (data, graph) = line_data(12, 4);
        let mut hp = Hyperparams::new(2);
        hp.epsilon = 1e9;
        let pert = Perturbation::none(12, 4, 2);
        let vs = init_from_fraction(4, 2, &hp, &graph, &[0.5, 0.5]);
        let out = run_cavi(vs, &data, &hp, &graph, 0.1, &pert).unwrap();
        assert_eq!(out.sweeps(), 1);
        assert_eq!(out.status, RunStatus::Converged);
        assert_eq!(out.elbo_trace.len(), 2);
    }

    #[test]
    fn sweep_budget_is_reported() {
        let (data, graph) = line_data(12, 4);
        let mut hp = Hyperparams::new(2);
        hp.epsilon = 1e-300;
        hp.max_sweeps = 3;
        let pert = Perturbation::none(12, 4, 2);
        let vs = init_from_fraction(4, 2, &hp, &graph, &[0.5, 0.5]);
        let out = run_cavi(vs, &data, &hp, &graph, 0.1, &pert).unwrap();
        assert_eq!(out.sweeps(), 3);
        assert_eq!(out.status, RunStatus::MaxSweepsReached);
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let (data, graph) = line_data(12, 4);
        let hp = Hyperparams::new(2);
        let pert = Perturbation::none(12, 4, 2);
        assert!(Engine::new(&data, &hp, &graph, 20.0, &pert).is_err());
        assert!(Engine::new(&data, &Hyperparams::new(1), &graph, 0.1, &pert).is_err());
        let mut bad = pert.clone();
        bad.weights[0] = 3.0;
        assert!(Engine::new(&data, &hp, &graph, 0.1, &bad).is_err());
    }
}
