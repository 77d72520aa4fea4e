use super::{RunStatus, VariationalState};
use crate::firth::FirthFit;
use crate::lattice::NeighborGraph;
use crate::model::{Dataset, Hyperparams};
use crate::normal;

const THETA_CLAMP: f64 = 8.0;

/// Starting point from a voxelwise Firth fit: coefficients and intercepts
/// from Firth, inclusion probabilities 0.5, sparsity at the logit of the
/// fraction of non-degenerate voxels with p < 0.05, E[Σ⁻¹] = I.
pub fn default_init(
    data: &Dataset,
    hp: &Hyperparams,
    firth: &FirthFit,
    graph: &NeighborGraph,
) -> VariationalState {
    let (m, p) = (data.n_voxels(), data.n_covariates());
    let usable: Vec<usize> = (0..firth.n_voxels())
        .filter(|&j| !firth.voxels[j].degenerate)
        .collect();
    let fractions: Vec<f64> = (0..p)
        .map(|k| {
            if usable.is_empty() {
                0.0
            } else {
                usable.iter().filter(|&&j| firth.pvalue(j, k) < 0.05).count() as f64
                    / usable.len() as f64
            }
        })
        .collect();
    let mut vs = init_from_fraction(m, p, hp, graph, &fractions);
    for j in 0..m {
        for k in 0..p {
            let b = firth.beta(j, k);
            vs.m_beta[j * p + k] = if b.is_finite() { b } else { 0.0 };
        }
        let b0 = firth.intercept(j);
        vs.m_beta0[j] = if b0.is_finite() { b0 } else { 0.0 };
    }
    vs
}

/// Starting point with zero coefficients and the given per-covariate active
/// fractions.
pub fn init_from_fraction(
    m: usize,
    p: usize,
    hp: &Hyperparams,
    graph: &NeighborGraph,
    fractions: &[f64],
) -> VariationalState {
    let pp = p * p;
    let identity = |scale: f64| -> Vec<f64> {
        (0..pp).map(|i| if i / p == i % p { scale } else { 0.0 }).collect()
    };
    let theta0: Vec<f64> = fractions
        .iter()
        .map(|&f| normal::logit(f).clamp(-THETA_CLAMP, THETA_CLAMP))
        .collect();
    let df = hp.wishart_df + (m - graph.n_components()) as f64;
    VariationalState {
        m,
        p,
        m_beta: vec![0.0; m * p],
        s_beta: (0..m).flat_map(|_| identity(hp.nu1)).collect(),
        m_beta0: vec![0.0; m],
        v_beta0: vec![hp.sigma0_sq; m],
        q_gamma: vec![0.5; m * p],
        m_theta: (0..m).flat_map(|_| theta0.iter().copied()).collect(),
        s_theta: (0..m).flat_map(|_| identity(1.0)).collect(),
        xi: vec![1.0; m * p],
        wishart_df: df,
        wishart_scale: identity(1.0 / df),
        elbo_trace: Vec::new(),
        status: RunStatus::NotRun,
    }
}
