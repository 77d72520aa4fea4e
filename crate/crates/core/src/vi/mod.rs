//! Mean-field coordinate-ascent variational inference.

mod engine;
mod init;

pub use engine::{cavi_sweep, compute_elbo, compute_elbo_anchored, run_cavi, Engine, ZStats};
pub use init::{default_init, init_from_fraction};

use crate::error::{BlessError, Result};

/// How the per-replicate prior shift enters the spike-and-slab mixture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ShiftMode {
    /// Both spike and slab are centred on the shift.
    #[default]
    Both,
    /// Only the spike is centred on the shift; the slab stays at 0.
    SpikeOnly,
}

impl ShiftMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ShiftMode::Both => "both",
            ShiftMode::SpikeOnly => "spike",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "both" => Some(ShiftMode::Both),
            "spike" => Some(ShiftMode::SpikeOnly),
            _ => None,
        }
    }
}

/// Subject weights and prior-mean shifts. Plain VI uses unit weights and
/// zero shifts.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub weights: Vec<f64>,
    /// M×P row-major.
    pub shifts: Vec<f64>,
    pub mode: ShiftMode,
}

impl Perturbation {
    pub fn none(n: usize, m: usize, p: usize) -> Self {
        Perturbation {
            weights: vec![1.0; n],
            shifts: vec![0.0; m * p],
            mode: ShiftMode::Both,
        }
    }

    pub fn validate(&self, n: usize, m: usize, p: usize) -> Result<()> {
        if self.weights.len() != n {
            return Err(BlessError::Dimension(format!(
                "{} weights for {} subjects",
                self.weights.len(),
                n
            )));
        }
        if self.shifts.len() != m * p {
            return Err(BlessError::Dimension(format!(
                "{} shifts, expected M×P = {}",
                self.shifts.len(),
                m * p
            )));
        }
        if self.weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(BlessError::Invalid("weights must be positive and finite".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - n as f64).abs() > 1e-8 * n as f64 {
            return Err(BlessError::Invalid(format!(
                "weights sum to {total}, expected {n}"
            )));
        }
        if self.shifts.iter().any(|s| !s.is_finite()) {
            return Err(BlessError::Invalid("shifts must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    NotRun,
    Converged,
    MaxSweepsReached,
}

impl RunStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunStatus::NotRun => "not_run",
            RunStatus::Converged => "converged",
            RunStatus::MaxSweepsReached => "max_sweeps_reached",
        }
    }
}

/// Parameters of every variational factor. Per-voxel blocks are stored
/// contiguously: vectors are M×P, covariances M×P×P (row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalState {
    pub m: usize,
    pub p: usize,
    pub m_beta: Vec<f64>,
    pub s_beta: Vec<f64>,
    pub m_beta0: Vec<f64>,
    pub v_beta0: Vec<f64>,
    pub q_gamma: Vec<f64>,
    pub m_theta: Vec<f64>,
    pub s_theta: Vec<f64>,
    pub xi: Vec<f64>,
    pub wishart_df: f64,
    /// P×P row-major.
    pub wishart_scale: Vec<f64>,
    /// `elbo_trace[k]` is the ELBO after k sweeps of the latest run.
    pub elbo_trace: Vec<f64>,
    pub status: RunStatus,
}

impl VariationalState {
    pub fn beta(&self, j: usize) -> &[f64] {
        &self.m_beta[j * self.p..(j + 1) * self.p]
    }

    pub fn beta_cov(&self, j: usize) -> &[f64] {
        let pp = self.p * self.p;
        &self.s_beta[j * pp..(j + 1) * pp]
    }

    /// Marginal posterior sd of β_k(s_j).
    pub fn beta_sd(&self, j: usize, k: usize) -> f64 {
        self.beta_cov(j)[k * self.p + k].sqrt()
    }

    pub fn gamma(&self, j: usize) -> &[f64] {
        &self.q_gamma[j * self.p..(j + 1) * self.p]
    }

    pub fn theta(&self, j: usize) -> &[f64] {
        &self.m_theta[j * self.p..(j + 1) * self.p]
    }

    /// E[Σ⁻¹] = df · scale.
    pub fn expected_precision(&self) -> Vec<f64> {
        self.wishart_scale.iter().map(|v| v * self.wishart_df).collect()
    }

    /// Column k of the coefficient means.
    pub fn beta_map(&self, k: usize) -> Vec<f64> {
        (0..self.m).map(|j| self.m_beta[j * self.p + k]).collect()
    }

    pub fn gamma_map(&self, k: usize) -> Vec<f64> {
        (0..self.m).map(|j| self.q_gamma[j * self.p + k]).collect()
    }

    pub fn sweeps(&self) -> usize {
        self.elbo_trace.len().saturating_sub(1)
    }

    pub fn final_elbo(&self) -> Option<f64> {
        self.elbo_trace.last().copied()
    }

    pub fn check_shape(&self, m: usize, p: usize) -> Result<()> {
        let pp = p * p;
        let ok = self.m == m
            && self.p == p
            && self.m_beta.len() == m * p
            && self.s_beta.len() == m * pp
            && self.m_beta0.len() == m
            && self.v_beta0.len() == m
            && self.q_gamma.len() == m * p
            && self.m_theta.len() == m * p
            && self.s_theta.len() == m * pp
            && self.xi.len() == m * p
            && self.wishart_scale.len() == pp;
        if ok {
            Ok(())
        } else {
            Err(BlessError::Dimension(format!(
                "variational state does not match M = {m}, P = {p}"
            )))
        }
    }
}

/// Active flags: inclusion probability strictly above one half.
pub fn threshold_inclusion(vs: &VariationalState) -> Vec<bool> {
    vs.q_gamma.iter().map(|&g| g > 0.5).collect()
}
