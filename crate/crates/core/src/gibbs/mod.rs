//! Gibbs sampling for the full model at a fixed spike variance.
//!
//! Two schemes share the γ, θ and Σ⁻¹ updates. `Augmented` samples every
//! latent z from its truncated normal and then (β, β0) from their Gaussian
//! conditionals. `Collapsed` integrates z out and moves (β, β0) jointly with an
//! independence Metropolis step from a Laplace-fitted Student-t proposal,
//! which leaves the same posterior invariant at a cost independent of N when
//! subjects share covariate rows.

pub mod samplers;

use log::{debug, info};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;

use crate::design::DesignPatterns;
use crate::error::{BlessError, Result};
use crate::lattice::NeighborGraph;
use crate::linalg;
use crate::model::{Dataset, Hyperparams, ModelState};
use crate::normal;
use crate::rng::{self, TAG_GIBBS_GLOBAL, TAG_GIBBS_THETA, TAG_GIBBS_VOXEL};
use crate::vi::VariationalState;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GibbsMode {
    Augmented,
    Collapsed,
}

impl GibbsMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            GibbsMode::Augmented => "augmented",
            GibbsMode::Collapsed => "collapsed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "augmented" => Some(GibbsMode::Augmented),
            "collapsed" => Some(GibbsMode::Collapsed),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThetaUpdate {
    PolyaGamma,
    /// Random-walk Metropolis with the given proposal sd, for cross-checking.
    RandomWalk { step: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GibbsConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub mode: GibbsMode,
    pub theta_update: ThetaUpdate,
    /// Keep θ at its initial value (needed when its posterior is improper).
    pub freeze_theta: bool,
    pub freeze_precision: bool,
    pub keep_gamma: bool,
    pub keep_theta: bool,
}

impl GibbsConfig {
    pub fn new(iterations: usize, burn_in: usize, seed: u64) -> Self {
        GibbsConfig {
            iterations,
            burn_in,
            thin: 1,
            seed,
            mode: GibbsMode::Augmented,
            theta_update: ThetaUpdate::PolyaGamma,
            freeze_theta: false,
            freeze_precision: false,
            keep_gamma: false,
            keep_theta: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.thin == 0 {
            return Err(BlessError::Config("iterations and thin must be positive".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(BlessError::Config(format!(
                "burn-in ({}) must be smaller than iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if let ThetaUpdate::RandomWalk { step } = self.theta_update {
            if !(step > 0.0) {
                return Err(BlessError::Config("random-walk step must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn n_retained(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }
}

#[derive(Clone, Debug)]
pub struct ChainOutput {
    pub m: usize,
    pub p: usize,
    pub retained: usize,
    /// (draw, j, p) order.
    pub beta: Vec<f64>,
    pub gamma: Option<Vec<u8>>,
    pub theta: Option<Vec<f64>>,
    pub final_state: ModelState,
    /// Acceptance rate of the Metropolis steps (collapsed β moves or θ random walk).
    pub acceptance: Option<f64>,
}

impl ChainOutput {
    pub fn beta_draws(&self, j: usize, k: usize) -> Vec<f64> {
        let mp = self.m * self.p;
        (0..self.retained).map(|r| self.beta[r * mp + j * self.p + k]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainSummary {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub tstat: Vec<f64>,
    pub ess: Vec<f64>,
}

/// Initial-positive-sequence effective sample size. A constant series
/// reports its length.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 || x.iter().all(|&v| v == x[0]) {
        return n as f64;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let c0 = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    if !(c0 > 0.0) {
        return n as f64;
    }
    let rho = |k: usize| -> f64 {
        let mut s = 0.0;
        for t in 0..n - k {
            s += (x[t] - mean) * (x[t + k] - mean);
        }
        s / n as f64 / c0
    };
    let mut tau = -1.0;
    let mut m = 0;
    while 2 * m + 1 < n {
        let g = rho(2 * m) + rho(2 * m + 1);
        if g <= 0.0 {
            break;
        }
        tau += 2.0 * g;
        m += 1;
    }
    n as f64 / tau.max(f64::MIN_POSITIVE)
}

pub fn chain_summary(chain: &ChainOutput) -> Result<ChainSummary> {
    if chain.retained < 10 {
        return Err(BlessError::Invalid(format!(
            "chain summary needs at least 10 retained draws, got {}",
            chain.retained
        )));
    }
    let mp = chain.m * chain.p;
    let r = chain.retained as f64;
    let cols: Vec<(f64, f64, f64)> = (0..mp)
        .into_par_iter()
        .map(|c| {
            let xs: Vec<f64> = (0..chain.retained).map(|t| chain.beta[t * mp + c]).collect();
            let mean = xs.iter().sum::<f64>() / r;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (r - 1.0);
            (mean, var.sqrt(), effective_sample_size(&xs))
        })
        .collect();
    let mean: Vec<f64> = cols.iter().map(|c| c.0).collect();
    let sd: Vec<f64> = cols.iter().map(|c| c.1).collect();
    let tstat = mean
        .iter()
        .zip(&sd)
        .map(|(m, s)| if *s > 0.0 { m / s } else { f64::NAN })
        .collect();
    Ok(ChainSummary {
        mean,
        sd,
        tstat,
        ess: cols.iter().map(|c| c.2).collect(),
    })
}

/// Starting point from a variational fit: means, thresholded inclusion and E[Σ⁻¹].
pub fn init_from_variational(vs: &VariationalState) -> ModelState {
    ModelState {
        beta: vs.m_beta.clone(),
        beta0: vs.m_beta0.clone(),
        gamma: vs.q_gamma.iter().map(|&g| if g > 0.5 { 1.0 } else { 0.0 }).collect(),
        theta: vs.m_theta.clone(),
        sigma_inv: linalg::mat_from_slice(vs.p, &vs.expected_precision()),
        z: None,
    }
}

/// Per-voxel Laplace proposal for the collapsed scheme, valid for one γ.
#[derive(Clone, Debug)]
struct Proposal {
    gamma: Vec<bool>,
    mode: Vec<f64>,
    /// Cholesky factor of the proposal covariance.
    chol_cov: Vec<f64>,
    /// Cholesky factor of the Hessian at the mode.
    chol_prec: Vec<f64>,
}

struct VoxelState {
    beta: Vec<f64>,
    beta0: f64,
    gamma: Vec<bool>,
    proposal: Option<Proposal>,
}

// Student-t degrees of freedom of the independence proposal.
const PROPOSAL_DF: f64 = 8.0;

struct Sampler<'a> {
    data: &'a Dataset,
    hp: &'a Hyperparams,
    graph: &'a NeighborGraph,
    nu0: f64,
    cfg: &'a GibbsConfig,
    pats: DesignPatterns,
    /// (count_y1, count_y0) per pattern, per voxel.
    counts: Vec<f64>,
    xtx: Vec<f64>,
    xsum: Vec<f64>,
}

impl<'a> Sampler<'a> {
    fn p(&self) -> usize {
        self.data.n_covariates()
    }

    fn prior_var(&self, g: bool) -> f64 {
        if g {
            self.hp.nu1
        } else {
            self.nu0
        }
    }

    fn counts(&self, j: usize) -> &[f64] {
        let k2 = 2 * self.pats.n_patterns();
        &self.counts[j * k2..(j + 1) * k2]
    }

    fn update_augmented<R: Rng>(&self, j: usize, v: &mut VoxelState, rng: &mut R) -> Result<()> {
        let p = self.p();
        let n = self.data.n_subjects();
        let x = self.data.x();
        let y = self.data.y_voxel(j);
        let mut xz = vec![0.0; p];
        let mut zsum = 0.0;
        for i in 0..n {
            let row = &x[i * p..(i + 1) * p];
            let eta = row.iter().zip(&v.beta).map(|(a, b)| a * b).sum::<f64>() + v.beta0;
            let z = samplers::truncated_normal(rng, eta, y[i] == 1);
            zsum += z;
            for k in 0..p {
                xz[k] += row[k] * z;
            }
        }
        // β | z, β0: precision XᵀX + diag(1/a), mean A⁻¹ Xᵀ(z − β0).
        let mut a = self.xtx.clone();
        for k in 0..p {
            a[k * p + k] += 1.0 / self.prior_var(v.gamma[k]);
        }
        if !linalg::chol_in_place(&mut a, p) {
            return Err(BlessError::not_pd(format!("beta conditional precision at voxel {j}")));
        }
        let mut mean: Vec<f64> = (0..p).map(|k| xz[k] - v.beta0 * self.xsum[k]).collect();
        linalg::chol_solve(&a, p, &mut mean);
        let e: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let dev = back_solve_transpose(&a, p, &e);
        for k in 0..p {
            v.beta[k] = mean[k] + dev[k];
        }
        // β0 | z, β.
        let prec0 = n as f64 + 1.0 / self.hp.sigma0_sq;
        let xb: f64 = (0..p).map(|k| self.xsum[k] * v.beta[k]).sum();
        let m0 = (zsum - xb) / prec0;
        let e0: f64 = rng.sample(StandardNormal);
        v.beta0 = m0 + e0 / prec0.sqrt();
        Ok(())
    }

    /// ln p(y_j | β, β0) + ln N(β; 0, diag a) + ln N(β0; 0, σ0²) up to a constant,
    /// with u = (β0, β).
    fn collapsed_log_target(&self, j: usize, gamma: &[bool], u: &[f64]) -> f64 {
        let p = self.p();
        let c = self.counts(j);
        let mut total = 0.0;
        for k in 0..self.pats.n_patterns() {
            let row = self.pats.row(k);
            let eta = u[0] + (0..p).map(|q| row[q] * u[q + 1]).sum::<f64>();
            let (n1, n0) = (c[2 * k], c[2 * k + 1]);
            if n1 > 0.0 {
                total += n1 * normal::ln_cdf(eta);
            }
            if n0 > 0.0 {
                total += n0 * normal::ln_cdf(-eta);
            }
        }
        total -= 0.5 * u[0] * u[0] / self.hp.sigma0_sq;
        for q in 0..p {
            total -= 0.5 * u[q + 1] * u[q + 1] / self.prior_var(gamma[q]);
        }
        total
    }

    fn laplace(&self, j: usize, gamma: &[bool], start: &[f64]) -> Result<Proposal> {
        let d = self.p() + 1;
        let p = self.p();
        let c = self.counts(j);
        let mut u = start.to_vec();
        let mut f = self.collapsed_log_target(j, gamma, &u);
        let mut h = vec![0.0; d * d];
        for iter in 0..100 {
            let mut g = vec![0.0; d];
            h.iter_mut().for_each(|v| *v = 0.0);
            let mut xt = vec![0.0; d];
            xt[0] = 1.0;
            for k in 0..self.pats.n_patterns() {
                let row = self.pats.row(k);
                xt[1..].copy_from_slice(row);
                let eta: f64 = (0..d).map(|q| xt[q] * u[q]).sum();
                let (n1, n0) = (c[2 * k], c[2 * k + 1]);
                let l1 = normal::inv_mills(eta);
                let l0 = normal::inv_mills(-eta);
                let score = n1 * l1 - n0 * l0;
                let curv = n1 * l1 * (eta + l1) + n0 * l0 * (l0 - eta);
                for a in 0..d {
                    g[a] += xt[a] * score;
                    for b in 0..d {
                        h[a * d + b] += xt[a] * xt[b] * curv;
                    }
                }
            }
            g[0] -= u[0] / self.hp.sigma0_sq;
            h[0] += 1.0 / self.hp.sigma0_sq;
            for q in 0..p {
                let a = self.prior_var(gamma[q]);
                g[q + 1] -= u[q + 1] / a;
                h[(q + 1) * d + q + 1] += 1.0 / a;
            }
            let mut l = h.clone();
            if !linalg::chol_in_place(&mut l, d) {
                return Err(BlessError::not_pd(format!("Laplace Hessian at voxel {j}")));
            }
            let mut step = g.clone();
            linalg::chol_solve(&l, d, &mut step);
            // Newton decrement: stop once the step is negligible in the posterior metric.
            let dec: f64 = g.iter().zip(&step).map(|(a, b)| a * b).sum();
            if dec < 1e-14 || iter == 99 {
                break;
            }
            let mut t = 1.0;
            let mut moved = false;
            for _ in 0..40 {
                let cand: Vec<f64> = u.iter().zip(&step).map(|(a, s)| a + t * s).collect();
                let fc = self.collapsed_log_target(j, gamma, &cand);
                if fc >= f {
                    u = cand;
                    f = fc;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved {
                break;
            }
        }
        let mut chol_prec = h;
        if !linalg::chol_in_place(&mut chol_prec, d) {
            return Err(BlessError::not_pd(format!("Laplace Hessian at voxel {j}")));
        }
        let mut cov = vec![0.0; d * d];
        linalg::chol_inverse(&chol_prec, d, &mut cov);
        if !linalg::chol_in_place(&mut cov, d) {
            return Err(BlessError::not_pd(format!("Laplace covariance at voxel {j}")));
        }
        Ok(Proposal {
            gamma: gamma.to_vec(),
            mode: u,
            chol_cov: cov,
            chol_prec,
        })
    }

    /// ln of the unnormalized multivariate-t proposal density at u.
    fn proposal_ln_density(prop: &Proposal, u: &[f64]) -> f64 {
        let d = prop.mode.len();
        // (u − mode)ᵀ H (u − mode) = |Lᵀ(u − mode)|² with H = L Lᵀ.
        let mut q = 0.0;
        for a in 0..d {
            let mut s = 0.0;
            for b in a..d {
                s += prop.chol_prec[b * d + a] * (u[b] - prop.mode[b]);
            }
            q += s * s;
        }
        -0.5 * (PROPOSAL_DF + d as f64) * (1.0 + q / PROPOSAL_DF).ln()
    }

    fn update_collapsed<R: Rng>(&self, j: usize, v: &mut VoxelState, rng: &mut R) -> Result<bool> {
        let d = self.p() + 1;
        let stale = v.proposal.as_ref().is_none_or(|pr| pr.gamma != v.gamma);
        if stale {
            let mut start = Vec::with_capacity(d);
            start.push(v.beta0);
            start.extend_from_slice(&v.beta);
            v.proposal = Some(self.laplace(j, &v.gamma, &start)?);
        }
        let prop = v.proposal.as_ref().expect("set above");
        let e: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let w: f64 = ChiSquared::new(PROPOSAL_DF).expect("positive df").sample(rng);
        let scale = (PROPOSAL_DF / w).sqrt();
        let mut cand = prop.mode.clone();
        for a in 0..d {
            for b in 0..=a {
                cand[a] += scale * prop.chol_cov[a * d + b] * e[b];
            }
        }
        let mut cur = Vec::with_capacity(d);
        cur.push(v.beta0);
        cur.extend_from_slice(&v.beta);
        let log_ratio = self.collapsed_log_target(j, &v.gamma, &cand)
            - self.collapsed_log_target(j, &v.gamma, &cur)
            - Self::proposal_ln_density(prop, &cand)
            + Self::proposal_ln_density(prop, &cur);
        let u: f64 = rng.random();
        if u.ln() < log_ratio {
            v.beta0 = cand[0];
            v.beta.copy_from_slice(&cand[1..]);
            Ok(true)
        } else {
            Ok(false)
        }
    }

    fn update_gamma<R: Rng>(&self, v: &mut VoxelState, theta: &[f64], rng: &mut R) {
        let (nu0, nu1) = (self.nu0, self.hp.nu1);
        for k in 0..v.gamma.len() {
            let b2 = v.beta[k] * v.beta[k];
            let log_odds = -0.5 * (nu1 / nu0).ln() - 0.5 * b2 / nu1 + 0.5 * b2 / nu0 + theta[k];
            let u: f64 = rng.random();
            v.gamma[k] = u < normal::sigmoid(log_odds);
        }
    }

    /// New θ(s_j) given its neighbours, Σ⁻¹ and γ(s_j). Returns (θ, accepted).
    fn draw_theta<R: Rng>(
        &self,
        j: usize,
        theta: &[f64],
        gamma: &[bool],
        omega: &[f64],
        rng: &mut R,
    ) -> Result<(Vec<f64>, bool)> {
        let p = self.p();
        let nb = self.graph.neighbors(j);
        let nj = nb.len() as f64;
        let mut bar = vec![0.0; p];
        for &r in nb {
            for k in 0..p {
                bar[k] += theta[r * p + k];
            }
        }
        if nj > 0.0 {
            bar.iter_mut().for_each(|b| *b /= nj);
        }
        let cur = &theta[j * p..(j + 1) * p];
        match self.cfg.theta_update {
            ThetaUpdate::PolyaGamma => {
                let mut q: Vec<f64> = omega.iter().map(|o| o * nj).collect();
                let mut rhs = vec![0.0; p];
                linalg::mat_vec(&q, p, &bar, &mut rhs);
                for k in 0..p {
                    let w = samplers::polya_gamma(rng, cur[k]);
                    q[k * p + k] += w;
                    rhs[k] += if gamma[k] { 0.5 } else { -0.5 };
                }
                if !linalg::chol_in_place(&mut q, p) {
                    return Err(BlessError::not_pd(format!("theta conditional precision at voxel {j}")));
                }
                linalg::chol_solve(&q, p, &mut rhs);
                let e: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
                let dev = back_solve_transpose(&q, p, &e);
                Ok(((0..p).map(|k| rhs[k] + dev[k]).collect(), true))
            }
            ThetaUpdate::RandomWalk { step } => {
                let log_target = |t: &[f64]| -> f64 {
                    let diff: Vec<f64> = (0..p).map(|k| t[k] - bar[k]).collect();
                    let mut s = -0.5 * nj * linalg::quad_form(omega, p, &diff);
                    for k in 0..p {
                        s += if gamma[k] { t[k] } else { 0.0 } - normal::softplus(t[k]);
                    }
                    s
                };
                let cand: Vec<f64> = (0..p)
                    .map(|k| {
                        let e: f64 = rng.sample(StandardNormal);
                        cur[k] + step * e
                    })
                    .collect();
                let u: f64 = rng.random();
                if u.ln() < log_target(&cand) - log_target(cur) {
                    Ok((cand, true))
                } else {
                    Ok((cur.to_vec(), false))
                }
            }
        }
    }
}

/// Solves Lᵀ x = e for lower-triangular L (row-major), giving x ~ N(0, (L Lᵀ)⁻¹).
fn back_solve_transpose(l: &[f64], p: usize, e: &[f64]) -> Vec<f64> {
    let mut x = e.to_vec();
    for a in (0..p).rev() {
        let mut s = x[a];
        for b in a + 1..p {
            s -= l[b * p + a] * x[b];
        }
        x[a] = s / l[a * p + a];
    }
    x
}

pub fn run_gibbs(
    data: &Dataset,
    hp: &Hyperparams,
    nu0: f64,
    graph: &NeighborGraph,
    cfg: &GibbsConfig,
    init: &ModelState,
) -> Result<ChainOutput> {
    cfg.validate()?;
    hp.validate()?;
    let (m, p) = (data.n_voxels(), data.n_covariates());
    if p == 0 || hp.p() != p || graph.n_voxels() != m {
        return Err(BlessError::Dimension(format!(
            "gibbs: data has M = {m}, P = {p}; hyperparameters P = {}, graph M = {}",
            hp.p(),
            graph.n_voxels()
        )));
    }
    if !(nu0 > 0.0 && nu0 <= hp.nu1) {
        return Err(BlessError::Invalid(format!("spike variance {nu0} outside (0, nu1]")));
    }
    if init.beta.len() != m * p
        || init.beta0.len() != m
        || init.gamma.len() != m * p
        || init.theta.len() != m * p
        || init.sigma_inv.nrows() != p
    {
        return Err(BlessError::Dimension("gibbs initial state does not match the data".into()));
    }

    let pats = DesignPatterns::new(data);
    let k2 = 2 * pats.n_patterns();
    let mut counts = vec![0.0; m * k2];
    for j in 0..m {
        pats.voxel_counts(data.y_voxel(j), None, &mut counts[j * k2..(j + 1) * k2]);
    }
    let x = data.x();
    let mut xtx = vec![0.0; p * p];
    let mut xsum = vec![0.0; p];
    for row in x.chunks_exact(p) {
        for a in 0..p {
            xsum[a] += row[a];
            for b in 0..p {
                xtx[a * p + b] += row[a] * row[b];
            }
        }
    }
    let s = Sampler {
        data,
        hp,
        graph,
        nu0,
        cfg,
        pats,
        counts,
        xtx,
        xsum,
    };

    let mut voxels: Vec<VoxelState> = (0..m)
        .map(|j| VoxelState {
            beta: init.beta[j * p..(j + 1) * p].to_vec(),
            beta0: init.beta0[j],
            gamma: init.gamma[j * p..(j + 1) * p].iter().map(|&g| g > 0.5).collect(),
            proposal: None,
        })
        .collect();
    let mut theta = init.theta.clone();
    let mut omega = linalg::mat_to_vec(&init.sigma_inv);
    let post_df = hp.wishart_df + (m - graph.n_components()) as f64;
    let colors = [graph.color_class(0), graph.color_class(1)];

    let retained = cfg.n_retained();
    let mut beta_out = Vec::with_capacity(retained * m * p);
    let mut gamma_out = cfg.keep_gamma.then(|| Vec::with_capacity(retained * m * p));
    let mut theta_out = cfg.keep_theta.then(|| Vec::with_capacity(retained * m * p));
    let (mut moves, mut accepts) = (0u64, 0u64);

    info!(
        "gibbs ({}) at nu0 = {nu0:.3e}: {} iterations, {} burn-in, thin {}",
        cfg.mode.as_str(),
        cfg.iterations,
        cfg.burn_in,
        cfg.thin
    );
    for it in 0..cfg.iterations {
        let tag_err = |e: BlessError| match e {
            BlessError::NotPositiveDefinite { context } => BlessError::NotPositiveDefinite {
                context: format!("{context}, gibbs iteration {}", it + 1),
            },
            other => other,
        };
        let th = &theta;
        let accepted: Vec<bool> = voxels
            .par_iter_mut()
            .enumerate()
            .map(|(j, v)| -> Result<bool> {
                let mut r = rng::stream(cfg.seed, TAG_GIBBS_VOXEL, it as u64, j as u64);
                let acc = match cfg.mode {
                    GibbsMode::Augmented => {
                        s.update_augmented(j, v, &mut r)?;
                        true
                    }
                    GibbsMode::Collapsed => s.update_collapsed(j, v, &mut r)?,
                };
                s.update_gamma(v, &th[j * p..(j + 1) * p], &mut r);
                Ok(acc)
            })
            .collect::<Result<Vec<bool>>>()
            .map_err(tag_err)?;
        if cfg.mode == GibbsMode::Collapsed {
            moves += m as u64;
            accepts += accepted.iter().filter(|&&a| a).count() as u64;
        }

        if !cfg.freeze_theta {
            for class in &colors {
                let th = &theta;
                let vox = &voxels;
                let om = &omega;
                let draws: Vec<(Vec<f64>, bool)> = class
                    .par_iter()
                    .map(|&j| {
                        let mut r = rng::stream(cfg.seed, TAG_GIBBS_THETA, it as u64, j as u64);
                        s.draw_theta(j, th, &vox[j].gamma, om, &mut r)
                    })
                    .collect::<Result<Vec<_>>>()
                    .map_err(tag_err)?;
                for (&j, (t, acc)) in class.iter().zip(draws) {
                    theta[j * p..(j + 1) * p].copy_from_slice(&t);
                    if let ThetaUpdate::RandomWalk { .. } = cfg.theta_update {
                        moves += 1;
                        accepts += acc as u64;
                    }
                }
            }
        }

        if !cfg.freeze_precision {
            let mut scatter = linalg::mat_to_vec(&hp.wishart_scale_inv);
            for (a, b) in graph.edges() {
                for k in 0..p {
                    for l in 0..p {
                        scatter[k * p + l] += (theta[a * p + k] - theta[b * p + k])
                            * (theta[a * p + l] - theta[b * p + l]);
                    }
                }
            }
            let scale = linalg::spd_inverse(&linalg::mat_from_slice(p, &scatter), || {
                format!("Wishart scale, gibbs iteration {}", it + 1)
            })?;
            let mut r = rng::stream(cfg.seed, TAG_GIBBS_GLOBAL, it as u64, 0);
            let w = samplers::wishart(&mut r, post_df, &scale).ok_or_else(|| {
                BlessError::not_pd(format!("Wishart draw, gibbs iteration {}", it + 1))
            })?;
            omega = linalg::mat_to_vec(&w);
        }

        let t = it + 1;
        if t > cfg.burn_in && (t - cfg.burn_in) % cfg.thin == 0 {
            for v in &voxels {
                beta_out.extend_from_slice(&v.beta);
            }
            if let Some(g) = gamma_out.as_mut() {
                for v in &voxels {
                    g.extend(v.gamma.iter().map(|&b| b as u8));
                }
            }
            if let Some(tq) = theta_out.as_mut() {
                tq.extend_from_slice(&theta);
            }
        }
        if t % 500 == 0 {
            debug!("gibbs iteration {t}/{}", cfg.iterations);
        }
    }

    let final_state = ModelState {
        beta: voxels.iter().flat_map(|v| v.beta.iter().copied()).collect(),
        beta0: voxels.iter().map(|v| v.beta0).collect(),
        gamma: voxels
            .iter()
            .flat_map(|v| v.gamma.iter().map(|&g| g as u8 as f64))
            .collect(),
        theta,
        sigma_inv: linalg::mat_from_slice(p, &omega),
        z: None,
    };
    Ok(ChainOutput {
        m,
        p,
        retained,
        beta: beta_out,
        gamma: gamma_out,
        theta: theta_out,
        final_state,
        acceptance: (moves > 0).then(|| accepts as f64 / moves as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_graph, LatticeMask};
    use crate::linalg::Mat;

    #[test]
    fn ess_of_constant_and_iid_chains() {
        assert_eq!(effective_sample_size(&[0.3; 50]), 50.0);
        let mut r = rng::stream(4, 99, 0, 0);
        let xs: Vec<f64> = (0..10_000).map(|_| r.sample(StandardNormal)).collect();
        let ess = effective_sample_size(&xs);
        assert!((ess / 1e4 - 1.0).abs() < 0.2, "{ess}");
        // AR(1) with φ = 0.9 has ESS ≈ n (1 − φ)/(1 + φ).
        let mut a = vec![0.0; 20_000];
        for t in 1..a.len() {
            let e: f64 = r.sample(StandardNormal);
            a[t] = 0.9 * a[t - 1] + e;
        }
        let ess = effective_sample_size(&a);
        let expect = 20_000.0 * 0.1 / 1.9;
        assert!((ess / expect - 1.0).abs() < 0.3, "{ess} vs {expect}");
    }

    fn toy(n: usize, m: usize, y: impl Fn(usize, usize) -> u8) -> (Dataset, NeighborGraph) {
        let x: Vec<f64> = (0..n).map(|i| ((i % 3) as f64) / 2.0).collect();
        let yv: Vec<u8> = (0..m).flat_map(|j| (0..n).map(move |i| (j, i))).map(|(j, i)| y(i, j)).collect();
        let data = Dataset::new(n, m, yv, x, vec!["x".into()]).unwrap();
        let graph = build_graph(&LatticeMask::full(&[m, 1]).unwrap()).unwrap();
        (data, graph)
    }

    fn start(m: usize) -> ModelState {
        ModelState {
            beta: vec![0.0; m],
            beta0: vec![0.0; m],
            gamma: vec![1.0; m],
            theta: vec![0.0; m],
            sigma_inv: Mat::identity(1, 1),
            z: None,
        }
    }

    #[test]
    fn summary_mean_is_the_draw_average() {
        let (data, graph) = toy(12, 3, |i, j| ((i + j) % 4 == 0) as u8);
        let hp = Hyperparams::new(1);
        let cfg = GibbsConfig::new(60, 20, 1);
        let ch = run_gibbs(&data, &hp, 0.05, &graph, &cfg, &start(3)).unwrap();
        assert_eq!(ch.retained, 40);
        assert_eq!(ch.beta.len(), 40 * 3);
        let s = chain_summary(&ch).unwrap();
        for j in 0..3 {
            let d = ch.beta_draws(j, 0);
            assert_eq!(s.mean[j], d.iter().sum::<f64>() / d.len() as f64);
        }
        let mut thin = cfg.clone();
        thin.thin = 7;
        assert_eq!(thin.n_retained(), 5);
    }

    #[test]
    fn chains_ignore_worker_count() {
        let (data, graph) = toy(15, 4, |i, j| ((i * 7 + j) % 5 < 2) as u8);
        let hp = Hyperparams::new(1);
        for mode in [GibbsMode::Augmented, GibbsMode::Collapsed] {
            let mut cfg = GibbsConfig::new(40, 10, 9);
            cfg.mode = mode;
            cfg.keep_gamma = true;
            let run = |threads: usize| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .unwrap()
                    .install(|| run_gibbs(&data, &hp, 0.05, &graph, &cfg, &start(4)).unwrap())
            };
            let (a, b) = (run(1), run(3));
            assert_eq!(a.beta, b.beta);
            assert_eq!(a.gamma, b.gamma);
            assert_eq!(a.final_state, b.final_state);
        }
    }

    #[test]
    fn all_zero_voxel_pushes_positive_covariate_negative() {
        let n = 40;
        let x: Vec<f64> = (0..n).map(|i| 0.5 + (i % 5) as f64).collect();
        let data = Dataset::new(n, 1, vec![0; n], x, vec!["x".into()]).unwrap();
        let graph = build_graph(&LatticeMask::full(&[1, 1]).unwrap()).unwrap();
        let mut hp = Hyperparams::new(1);
        hp.nu1 = 1.0;
        hp.sigma0_sq = 1.0;
        for mode in [GibbsMode::Augmented, GibbsMode::Collapsed] {
            let mut cfg = GibbsConfig::new(3000, 500, 2);
            cfg.mode = mode;
            cfg.freeze_theta = true;
            cfg.freeze_precision = true;
            let ch = run_gibbs(&data, &hp, 1.0, &graph, &cfg, &start(1)).unwrap();
            let s = chain_summary(&ch).unwrap();
            assert!(s.mean[0] < 0.0 && s.tstat[0] < -1.0, "{mode:?}: {:?}", s);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(GibbsConfig::new(10, 10, 0).validate().is_err());
        let mut c = GibbsConfig::new(10, 2, 0);
        c.thin = 0;
        assert!(c.validate().is_err());
        c.thin = 1;
        c.theta_update = ThetaUpdate::RandomWalk { step: 0.0 };
        assert!(c.validate().is_err());
    }
}
