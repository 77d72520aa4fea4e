//! Bayesian-bootstrap approximate posterior sampling: each replicate re-runs
//! CAVI under Dirichlet subject weights and a randomly shifted prior mean.

use log::{info, warn};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;

use crate::error::{BlessError, Result};
use crate::lattice::NeighborGraph;
use crate::model::{Dataset, Hyperparams};
use crate::rng::{self, TAG_SHIFTS, TAG_WEIGHTS};
use crate::vi::{run_cavi, Perturbation, ShiftMode, VariationalState};

#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapConfig {
    pub b: usize,
    /// Dirichlet concentration.
    pub alpha: f64,
    pub base_seed: u64,
    /// Spike variance the replicates are fitted at (the last DPE step).
    pub nu0_target: f64,
    pub shift_mode: ShiftMode,
    /// Replicate convergence tolerance; `None` uses the plain-VI ε.
    pub epsilon: Option<f64>,
}

impl BootstrapConfig {
    pub fn new(b: usize, nu0_target: f64) -> Self {
        BootstrapConfig {
            b,
            alpha: 1.0,
            base_seed: 0,
            nu0_target,
            shift_mode: ShiftMode::Both,
            epsilon: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.b < 1 {
            return Err(BlessError::Config("bootstrap replicates must be at least 1".into()));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(BlessError::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.nu0_target > 0.0) || !self.nu0_target.is_finite() {
            return Err(BlessError::Config(format!(
                "target spike variance must be positive, got {}",
                self.nu0_target
            )));
        }
        if let Some(eps) = self.epsilon {
            if !(eps > 0.0) {
                return Err(BlessError::Config(format!("bootstrap epsilon must be positive, got {eps}")));
            }
        }
        Ok(())
    }
}

/// N times a symmetric Dirichlet(α) draw, keyed by (seed, b).
pub fn draw_weights(seed: u64, b: usize, n: usize, alpha: f64) -> Vec<f64> {
    let mut rng = rng::stream(seed, TAG_WEIGHTS, b as u64, 0);
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let mut w: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng)).collect();
    // Very small α can underflow every draw; fall back to uniform rather than 0/0.
    let total: f64 = w.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return vec![1.0; n];
    }
    let scale = n as f64 / total;
    for v in w.iter_mut() {
        *v = (*v * scale).max(f64::MIN_POSITIVE);
    }
    w
}

/// M×P iid N(0, ν0) prior-mean shifts, keyed by (seed, b).
pub fn draw_shifts(seed: u64, b: usize, m: usize, p: usize, nu0: f64) -> Vec<f64> {
    let mut rng = rng::stream(seed, TAG_SHIFTS, b as u64, 0);
    let sd = nu0.sqrt();
    (0..m * p)
        .map(|_| {
            let e: f64 = rng.sample(StandardNormal);
            sd * e
        })
        .collect()
}

pub fn replicate_perturbation(cfg: &BootstrapConfig, b: usize, n: usize, m: usize, p: usize) -> Perturbation {
    Perturbation {
        weights: draw_weights(cfg.base_seed, b, n, cfg.alpha),
        shifts: draw_shifts(cfg.base_seed, b, m, p, cfg.nu0_target),
        mode: cfg.shift_mode,
    }
}

/// Converged coefficient means (M×P) of replicate `b`.
pub fn fit_replicate(
    b: usize,
    data: &Dataset,
    hp: &Hyperparams,
    graph: &NeighborGraph,
    cfg: &BootstrapConfig,
    warm_init: &VariationalState,
) -> Result<Vec<f64>> {
    let (n, m, p) = (data.n_subjects(), data.n_voxels(), data.n_covariates());
    let pert = replicate_perturbation(cfg, b, n, m, p);
    let mut hp_b = hp.clone();
    if let Some(eps) = cfg.epsilon {
        hp_b.epsilon = eps;
    }
    let state = run_cavi(warm_init.clone(), data, &hp_b, graph, cfg.nu0_target, &pert)
        .map_err(|e| tag_replicate(e, b))?;
    Ok(state.m_beta)
}

fn tag_replicate(e: BlessError, b: usize) -> BlessError {
    match e {
        BlessError::NotPositiveDefinite { context } => BlessError::NotPositiveDefinite {
            context: format!("{context}, bootstrap replicate {b}"),
        },
        BlessError::Numeric(msg) => BlessError::Numeric(format!("{msg} (bootstrap replicate {b})")),
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorEnsemble {
    pub m: usize,
    pub p: usize,
    /// Indices of the successful replicates, ascending.
    pub replicates: Vec<usize>,
    /// (b, j, p) order over the successful replicates.
    pub samples: Vec<f64>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// mean / sd where sd > 0, NaN elsewhere.
    pub tstat: Vec<f64>,
    pub failed: Vec<usize>,
}

impl PosteriorEnsemble {
    pub fn from_samples(m: usize, p: usize, replicates: Vec<usize>, samples: Vec<f64>) -> Result<Self> {
        let mp = m * p;
        let b = replicates.len();
        if b == 0 || samples.len() != b * mp {
            return Err(BlessError::Dimension(format!(
                "{} samples for {b} replicates of M×P = {mp}",
                samples.len()
            )));
        }
        let mut mean = vec![0.0; mp];
        for row in samples.chunks(mp) {
            for (a, v) in mean.iter_mut().zip(row) {
                *a += v;
            }
        }
        for a in mean.iter_mut() {
            *a /= b as f64;
        }
        let mut ss = vec![0.0; mp];
        for row in samples.chunks(mp) {
            for ((s, v), mu) in ss.iter_mut().zip(row).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
        let sd: Vec<f64> = if b > 1 {
            ss.iter().map(|s| (s / (b - 1) as f64).sqrt()).collect()
        } else {
            vec![0.0; mp]
        };
        let tstat = mean
            .iter()
            .zip(&sd)
            .map(|(mu, s)| if *s > 0.0 { mu / s } else { f64::NAN })
            .collect();
        Ok(PosteriorEnsemble {
            m,
            p,
            replicates,
            samples,
            mean,
            sd,
            tstat,
            failed: Vec::new(),
        })
    }

    pub fn n_replicates(&self) -> usize {
        self.replicates.len()
    }

    pub fn sample(&self, r: usize) -> &[f64] {
        let mp = self.m * self.p;
        &self.samples[r * mp..(r + 1) * mp]
    }

    /// Draws of β_k(s_j) across replicates.
    pub fn draws(&self, j: usize, k: usize) -> Vec<f64> {
        (0..self.n_replicates())
            .map(|r| self.samples[r * self.m * self.p + j * self.p + k])
            .collect()
    }

    pub fn column(values: &[f64], p: usize, k: usize) -> Vec<f64> {
        values.iter().skip(k).step_by(p).copied().collect()
    }
}

pub fn run_bootstrap(
    data: &Dataset,
    hp: &Hyperparams,
    graph: &NeighborGraph,
    cfg: &BootstrapConfig,
    warm_init: &VariationalState,
) -> Result<PosteriorEnsemble> {
    cfg.validate()?;
    let (m, p) = (data.n_voxels(), data.n_covariates());
    warm_init.check_shape(m, p)?;
    info!("bootstrap: {} replicates at nu0 = {:.3e}", cfg.b, cfg.nu0_target);
    let results: Vec<Result<Vec<f64>>> = (0..cfg.b)
        .into_par_iter()
        .map(|b| fit_replicate(b, data, hp, graph, cfg, warm_init))
        .collect();
    let mut replicates = Vec::with_capacity(cfg.b);
    let mut samples = Vec::with_capacity(cfg.b * m * p);
    let mut failed = Vec::new();
    let mut first_error = None;
    for (b, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => {
                replicates.push(b);
                samples.extend_from_slice(&s);
            }
            Err(e) => {
                warn!("bootstrap replicate {b} failed: {e}");
                failed.push(b);
                first_error.get_or_insert(e);
            }
        }
    }
    if failed.len() * 10 > cfg.b || replicates.is_empty() {
        let e = first_error.expect("at least one failure");
        return Err(BlessError::Numeric(format!(
            "{} of {} bootstrap replicates failed (limit 10%); first failure: {e}",
            failed.len(),
            cfg.b
        )));
    }
    if !failed.is_empty() {
        warn!("{} bootstrap replicates excluded", failed.len());
    }
    let mut ens = PosteriorEnsemble::from_samples(m, p, replicates, samples)?;
    ens.failed = failed;
    Ok(ens)
}
