//! Backwards dynamic posterior exploration: CAVI over a decreasing sequence
//! of spike variances, each step warm-started from the previous one.

use log::info;
use rayon::prelude::*;

use crate::error::{BlessError, Result};
use crate::lattice::NeighborGraph;
use crate::linalg;
use crate::model::{mcar_quadratic, wishart_ln_pdf, Dataset, Hyperparams};
use crate::normal;
use crate::vi::{threshold_inclusion, Engine, Perturbation, VariationalState};

#[derive(Clone, Debug)]
pub struct DpeStep {
    pub nu0: f64,
    pub state: VariationalState,
    pub active: Vec<bool>,
    pub log_marginal: f64,
}

#[derive(Clone, Debug)]
pub struct DpePath {
    pub steps: Vec<DpeStep>,
}

impl DpePath {
    /// The state at the smallest spike variance.
    pub fn final_state(&self) -> &VariationalState {
        &self.steps.last().expect("non-empty path").state
    }

    pub fn final_step(&self) -> &DpeStep {
        self.steps.last().expect("non-empty path")
    }
}

pub fn run_dpe(
    data: &Dataset,
    hp: &Hyperparams,
    graph: &NeighborGraph,
    init: VariationalState,
) -> Result<DpePath> {
    hp.validate()?;
    let pert = Perturbation::none(data.n_subjects(), data.n_voxels(), data.n_covariates());
    let mut steps: Vec<DpeStep> = Vec::with_capacity(hp.nu0_sequence.len());
    let mut current = init;
    for (k, &nu0) in hp.nu0_sequence.iter().enumerate() {
        let eng = Engine::new(data, hp, graph, nu0, &pert)?;
        let state = eng.run(current).map_err(|e| tag_step(e, k, nu0))?;
        let active = threshold_inclusion(&state);
        let log_marginal = approx_log_marginal(&state, data, hp, graph)?;
        info!(
            "dpe step {}/{} ln nu0 = {:.2}: {} sweeps, {} active, log-marginal {:.4}",
            k + 1,
            hp.nu0_sequence.len(),
            nu0.ln(),
            state.sweeps(),
            active.iter().filter(|&&a| a).count(),
            log_marginal
        );
        current = state.clone();
        steps.push(DpeStep {
            nu0,
            state,
            active,
            log_marginal,
        });
    }
    Ok(DpePath { steps })
}

fn tag_step(e: BlessError, k: usize, nu0: f64) -> BlessError {
    match e {
        BlessError::NotPositiveDefinite { context } => BlessError::NotPositiveDefinite {
            context: format!("{context}, annealing step {} (nu0 = {nu0:e})", k + 1),
        },
        BlessError::Numeric(msg) => {
            BlessError::Numeric(format!("{msg} (annealing step {}, nu0 = {nu0:e})", k + 1))
        }
        other => other,
    }
}

/// Jensen lower bound on ln ∫ p(y_j | β_I, β0) p(β_I) p(β0) dβ_I dβ0 for every
/// voxel, where only the covariates flagged in `included` (M×P) enter the
/// design and carry the slab prior; q is the marginal of the variational
/// state on those coordinates.
pub fn restricted_evidence_bound(
    vs: &VariationalState,
    data: &Dataset,
    hp: &Hyperparams,
    graph: &NeighborGraph,
    included: &[bool],
) -> Result<Vec<f64>> {
    let (m, p) = (data.n_voxels(), data.n_covariates());
    vs.check_shape(m, p)?;
    if included.len() != m * p {
        return Err(BlessError::Dimension("inclusion flags must be M×P".into()));
    }
    let pert = Perturbation::none(data.n_subjects(), m, p);
    let eng = Engine::new(data, hp, graph, hp.nu1, &pert)?;
    let ln2pi = 2.0 * normal::LN_SQRT_2PI;
    (0..m)
        .into_par_iter()
        .map(|j| {
            let idx: Vec<usize> = (0..p).filter(|&k| included[j * p + k]).collect();
            let q = idx.len();
            let mb = vs.beta(j);
            let sb = vs.beta_cov(j);
            let m_i: Vec<f64> = idx.iter().map(|&k| mb[k]).collect();
            let s_i: Vec<f64> = idx
                .iter()
                .flat_map(|&a| idx.iter().map(move |&b| sb[a * p + b]))
                .collect();
            let (m0, v0) = (vs.m_beta0[j], vs.v_beta0[j]);
            let c = eng.voxel_counts(j);
            let mut total = 0.0;
            for k in 0..eng.pats.n_patterns() {
                let x = eng.pats.row(k);
                let a: f64 = idx.iter().zip(&m_i).map(|(&t, v)| x[t] * v).sum::<f64>() + m0;
                let xs: f64 = (0..q)
                    .map(|r| (0..q).map(|s| x[idx[r]] * s_i[r * q + s] * x[idx[s]]).sum::<f64>())
                    .sum();
                let n = c[2 * k] + c[2 * k + 1];
                if c[2 * k] > 0.0 {
                    total += c[2 * k] * normal::ln_cdf(a);
                }
                if c[2 * k + 1] > 0.0 {
                    total += c[2 * k + 1] * normal::ln_cdf(-a);
                }
                total -= 0.5 * n * (xs + v0);
            }
            for r in 0..q {
                total += -0.5 * (ln2pi + hp.nu1.ln()) - 0.5 * (m_i[r] * m_i[r] + s_i[r * q + r]) / hp.nu1;
            }
            if q > 0 {
                let (_, ld) = linalg::spd_inverse_slice(&s_i, q).ok_or_else(|| {
                    BlessError::not_pd(format!("restricted covariance at voxel {j}"))
                })?;
                total += 0.5 * (q as f64 * (1.0 + ln2pi) + ld);
            }
            let s0 = hp.sigma0_sq;
            total += -0.5 * (ln2pi + s0.ln()) - 0.5 * (m0 * m0 + v0) / s0;
            total += 0.5 * (1.0 + ln2pi + v0.ln());
            Ok(total)
        })
        .collect()
}

/// Approximate ln of the marginal posterior of the thresholded model under a
/// point-mass spike, with the sparsity field and precision fixed at their
/// variational means.
pub fn approx_log_marginal(
    vs: &VariationalState,
    data: &Dataset,
    hp: &Hyperparams,
    graph: &NeighborGraph,
) -> Result<f64> {
    let included = threshold_inclusion(vs);
    let bound: f64 = restricted_evidence_bound(vs, data, hp, graph, &included)?.iter().sum();
    let p = vs.p;
    let omega = linalg::mat_from_slice(p, &vs.expected_precision());
    let mut gamma_term = 0.0;
    for (i, &th) in vs.m_theta.iter().enumerate() {
        gamma_term += if included[i] { th } else { 0.0 } - normal::softplus(th);
    }
    let rank = (vs.m - graph.n_components()) as f64;
    let omega_ld = linalg::spd_logdet(&omega, || "expected precision".into())?;
    let mcar = mcar_quadratic(&vs.m_theta, &omega, graph) + 0.5 * rank * omega_ld;
    let wishart = wishart_ln_pdf(&omega, hp.wishart_df, &hp.wishart_scale_inv)?;
    Ok(bound + gamma_term + mcar + wishart)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathRow {
    pub nu0: f64,
    pub voxel: usize,
    pub covariate: usize,
    pub mean: f64,
    pub active: bool,
}

/// One row per (step, voxel, covariate).
pub fn export_regularization_path(path: &DpePath) -> Vec<PathRow> {
    let mut rows = Vec::new();
    for step in &path.steps {
        let p = step.state.p;
        for j in 0..step.state.m {
            for k in 0..p {
                rows.push(PathRow {
                    nu0: step.nu0,
                    voxel: j,
                    covariate: k,
                    mean: step.state.m_beta[j * p + k],
                    active: step.active[j * p + k],
                });
            }
        }
    }
    rows
}
