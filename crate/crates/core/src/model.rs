//! Data, hyperparameters and the log joint density of the spatial
//! spike-and-slab probit model.

use log::warn;

use crate::error::{BlessError, Result};
use crate::lattice::NeighborGraph;
use crate::linalg::{self, Mat};
use crate::normal;

/// Binary responses for N subjects over M voxels plus an N×P design.
///
/// Responses are stored voxel-major (`y[j * n + i]`) because every fit walks
/// the subjects of one voxel at a time.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    n: usize,
    m: usize,
    p: usize,
    y: Vec<u8>,
    x: Vec<f64>,
    names: Vec<String>,
}

impl Dataset {
    /// `y_voxel_major[j * n + i]` is y_i(s_j); `x[i * p + k]` is covariate k of subject i.
    pub fn new(
        n: usize,
        m: usize,
        y_voxel_major: Vec<u8>,
        x: Vec<f64>,
        names: Vec<String>,
    ) -> Result<Self> {
        let p = names.len();
        if n == 0 || m == 0 {
            return Err(BlessError::Dimension("dataset needs N ≥ 1 and M ≥ 1".into()));
        }
        if y_voxel_major.len() != n * m {
            return Err(BlessError::Dimension(format!(
                "Y has {} entries, expected N×M = {}",
                y_voxel_major.len(),
                n * m
            )));
        }
        if x.len() != n * p {
            return Err(BlessError::Dimension(format!(
                "X has {} entries, expected N×P = {}",
                x.len(),
                n * p
            )));
        }
        if y_voxel_major.iter().any(|&v| v > 1) {
            return Err(BlessError::Invalid("Y entries must be 0 or 1".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(BlessError::Invalid("X contains non-finite values".into()));
        }
        Ok(Dataset {
            n,
            m,
            p,
            y: y_voxel_major,
            x,
            names,
        })
    }

    /// Build from subject-major responses (`y[i * m + j]`).
    pub fn from_subject_major(
        n: usize,
        m: usize,
        y_subject_major: &[u8],
        x: Vec<f64>,
        names: Vec<String>,
    ) -> Result<Self> {
        if y_subject_major.len() != n * m {
            return Err(BlessError::Dimension(format!(
                "Y has {} entries, expected N×M = {}",
                y_subject_major.len(),
                n * m
            )));
        }
        let mut y = vec![0u8; n * m];
        for i in 0..n {
            for j in 0..m {
                y[j * n + i] = y_subject_major[i * m + j];
            }
        }
        Self::new(n, m, y, x, names)
    }

    pub fn n_subjects(&self) -> usize {
        self.n
    }

    pub fn n_voxels(&self) -> usize {
        self.m
    }

    pub fn n_covariates(&self) -> usize {
        self.p
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// y(s_j) as an N-vector.
    pub fn y_voxel(&self, j: usize) -> &[u8] {
        &self.y[j * self.n..(j + 1) * self.n]
    }

    pub fn y(&self, i: usize, j: usize) -> u8 {
        self.y[j * self.n + i]
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    /// Design with a leading intercept column, N×(P+1) row-major.
    pub fn design_with_intercept(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n * (self.p + 1));
        for i in 0..self.n {
            out.push(1.0);
            out.extend_from_slice(self.x_row(i));
        }
        out
    }

    /// Rescale every covariate to mean 0 and sd 1 (constant columns are only centered).
    pub fn standardize(&mut self) {
        let n = self.n as f64;
        for k in 0..self.p {
            let mean = (0..self.n).map(|i| self.x[i * self.p + k]).sum::<f64>() / n;
            let var = (0..self.n)
                .map(|i| (self.x[i * self.p + k] - mean).powi(2))
                .sum::<f64>()
                / n;
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            for i in 0..self.n {
                self.x[i * self.p + k] = (self.x[i * self.p + k] - mean) / sd;
            }
        }
    }

    /// True when [1, X] has full column rank; logs a warning otherwise.
    pub fn check_rank(&self) -> bool {
        let q = self.p + 1;
        let design = self.design_with_intercept();
        let mut gram = Mat::zeros(q, q);
        for i in 0..self.n {
            let row = &design[i * q..(i + 1) * q];
            for a in 0..q {
                for b in 0..q {
                    gram[(a, b)] += row[a] * row[b];
                }
            }
        }
        let scale = gram.diagonal().max().max(1.0);
        let ok = nalgebra::Cholesky::new(gram / scale)
            .map(|ch| ch.l_dirty().diagonal().iter().all(|d| *d > 1e-7))
            .unwrap_or(false);
        if !ok {
            warn!("design [1, X] is rank deficient; coefficients are not identified by the data");
        }
        ok
    }
}

/// Prior and optimisation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct Hyperparams {
    /// Spike variances, strictly decreasing (the annealing order).
    pub nu0_sequence: Vec<f64>,
    /// Slab variance ν1.
    pub nu1: f64,
    /// Prior variance of the voxelwise intercepts.
    pub sigma0_sq: f64,
    /// Wishart degrees of freedom ν.
    pub wishart_df: f64,
    /// Inverse of the Wishart scale matrix (identity by default), P×P.
    pub wishart_scale_inv: Mat,
    /// Relative ELBO change below which CAVI stops.
    pub epsilon: f64,
    pub max_sweeps: usize,
}

impl Hyperparams {
    /// Defaults: 15 spike variances exp(-1) … exp(-20), ν1 = 10, σ0² = 100, ν = P.
    pub fn new(p: usize) -> Self {
        Hyperparams {
            nu0_sequence: log_spaced_decreasing(-1.0, -20.0, 15),
            nu1: 10.0,
            sigma0_sq: 100.0,
            wishart_df: p as f64,
            wishart_scale_inv: Mat::identity(p, p),
            epsilon: 1e-5,
            max_sweeps: 500,
        }
    }

    pub fn p(&self) -> usize {
        self.wishart_scale_inv.nrows()
    }

    pub fn smallest_nu0(&self) -> f64 {
        *self.nu0_sequence.last().expect("validated non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.p();
        if self.nu0_sequence.is_empty() {
            return Err(BlessError::Config("nu0 sequence is empty".into()));
        }
        if self.nu0_sequence.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(BlessError::Config("all spike variances must be positive".into()));
        }
        if self.nu0_sequence.windows(2).any(|w| w[1] >= w[0]) {
            return Err(BlessError::Config(
                "spike variances must be strictly decreasing".into(),
            ));
        }
        if !(self.nu1 > 0.0) {
            return Err(BlessError::Config("slab variance nu1 must be positive".into()));
        }
        if self.nu0_sequence[0] > self.nu1 {
            return Err(BlessError::Config(format!(
                "largest spike variance {} exceeds slab variance {}",
                self.nu0_sequence[0], self.nu1
            )));
        }
        if !(self.sigma0_sq > 0.0) {
            return Err(BlessError::Config("sigma0_sq must be positive".into()));
        }
        if self.wishart_df < p as f64 {
            return Err(BlessError::Config(format!(
                "wishart_df {} is below P = {}",
                self.wishart_df, p
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(BlessError::Config("epsilon must be positive".into()));
        }
        if self.max_sweeps == 0 {
            return Err(BlessError::Config("max_sweeps must be positive".into()));
        }
        linalg::cholesky(&self.wishart_scale_inv, || "Wishart scale".into())?;
        Ok(())
    }
}

/// `count` values exp(a) … exp(b), equispaced in log space.
pub fn log_spaced_decreasing(log_start: f64, log_end: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![log_start.exp()];
    }
    (0..count)
        .map(|k| (log_start + (log_end - log_start) * k as f64 / (count - 1) as f64).exp())
        .collect()
}

/// A point in parameter space. `gamma` may be fractional.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    /// β(s_j), M×P row-major.
    pub beta: Vec<f64>,
    pub beta0: Vec<f64>,
    pub gamma: Vec<f64>,
    pub theta: Vec<f64>,
    /// Σ⁻¹.
    pub sigma_inv: Mat,
    /// Optional latent z, voxel-major M×N.
    pub z: Option<Vec<f64>>,
}

/// η_i = x_iᵀβ + β0 for every subject.
pub fn linear_predictor(x: &[f64], p: usize, beta: &[f64], beta0: f64) -> Result<Vec<f64>> {
    if beta.len() != p || (p > 0 && x.len() % p != 0) {
        return Err(BlessError::Dimension(format!(
            "linear predictor: beta has {} entries, X has {} columns",
            beta.len(),
            p
        )));
    }
    if p == 0 {
        return Ok(vec![beta0; 0]);
    }
    Ok(x.chunks_exact(p)
        .map(|row| row.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>() + beta0)
        .collect())
}

/// −½ Σ_{j∼j′} (θ_j − θ_j′)ᵀ Ω (θ_j − θ_j′), each unordered pair once.
pub fn mcar_quadratic(theta: &[f64], omega: &Mat, graph: &NeighborGraph) -> f64 {
    let p = omega.nrows();
    let mut diff = vec![0.0; p];
    let mut total = 0.0;
    for (j, r) in graph.edges() {
        for k in 0..p {
            diff[k] = theta[j * p + k] - theta[r * p + k];
        }
        let mut q = 0.0;
        for a in 0..p {
            for b in 0..p {
                q += diff[a] * omega[(a, b)] * diff[b];
            }
        }
        total += q;
    }
    -0.5 * total
}

/// Log Wishart density of Ω with `df` degrees of freedom and scale V (given V⁻¹).
pub fn wishart_ln_pdf(omega: &Mat, df: f64, scale_inv: &Mat) -> Result<f64> {
    let p = omega.nrows();
    let pf = p as f64;
    let ld_omega = linalg::spd_logdet(omega, || "precision matrix".into())?;
    let ld_scale_inv = linalg::spd_logdet(scale_inv, || "Wishart scale".into())?;
    Ok((df - pf - 1.0) / 2.0 * ld_omega - 0.5 * linalg::trace_product(scale_inv, omega)
        - df * pf / 2.0 * std::f64::consts::LN_2
        + df / 2.0 * ld_scale_inv
        - linalg::mv_ln_gamma(p, df / 2.0))
}

/// The separate factors of the log joint, for inspection and testing.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LogJointTerms {
    pub likelihood: f64,
    pub beta0_prior: f64,
    pub beta_prior: f64,
    pub gamma_prior: f64,
    pub mcar: f64,
    pub wishart: f64,
}

impl LogJointTerms {
    pub fn total(&self) -> f64 {
        self.likelihood
            + self.beta0_prior
            + self.beta_prior
            + self.gamma_prior
            + self.mcar
            + self.wishart
    }
}

pub fn log_joint_terms(
    state: &ModelState,
    data: &Dataset,
    nu0: f64,
    hp: &Hyperparams,
    graph: &NeighborGraph,
) -> Result<LogJointTerms> {
    let (n, m, p) = (data.n_subjects(), data.n_voxels(), data.n_covariates());
    if state.beta.len() != m * p
        || state.gamma.len() != m * p
        || state.theta.len() != m * p
        || state.beta0.len() != m
        || state.sigma_inv.nrows() != p
        || graph.n_voxels() != m
    {
        return Err(BlessError::Dimension("model state does not match the dataset".into()));
    }
    if let Some(z) = &state.z {
        if z.len() != n * m {
            return Err(BlessError::Dimension("z must have N×M entries".into()));
        }
    }
    let omega_ld = linalg::spd_logdet(&state.sigma_inv, || "precision not positive definite".into())
        .map_err(|_| BlessError::not_pd("sigma_inv"))?;

    let mut terms = LogJointTerms::default();
    for j in 0..m {
        let beta = &state.beta[j * p..(j + 1) * p];
        let eta = linear_predictor(data.x(), p, beta, state.beta0[j])?;
        let y = data.y_voxel(j);
        match &state.z {
            Some(z) => {
                let zj = &z[j * n..(j + 1) * n];
                for i in 0..n {
                    let consistent = if y[i] == 1 { zj[i] > 0.0 } else { zj[i] <= 0.0 };
                    if !consistent {
                        terms.likelihood = f64::NEG_INFINITY;
                    }
                    terms.likelihood += normal::ln_pdf(zj[i] - eta[i]);
                }
            }
            None => {
                for i in 0..n {
                    let s = if y[i] == 1 { 1.0 } else { -1.0 };
                    terms.likelihood += normal::ln_cdf(s * eta[i]);
                }
            }
        }
        terms.beta0_prior += normal::ln_pdf(state.beta0[j] / hp.sigma0_sq.sqrt())
            - 0.5 * hp.sigma0_sq.ln();
        for k in 0..p {
            let g = state.gamma[j * p + k];
            let th = state.theta[j * p + k];
            let var = hp.nu1 * g + nu0 * (1.0 - g);
            terms.beta_prior += normal::ln_pdf(beta[k] / var.sqrt()) - 0.5 * var.ln();
            terms.gamma_prior += g * th - normal::softplus(th);
        }
    }
    let rank = (m - graph.n_components()) as f64;
    terms.mcar = mcar_quadratic(&state.theta, &state.sigma_inv, graph) + 0.5 * rank * omega_ld;
    terms.wishart = wishart_ln_pdf(&state.sigma_inv, hp.wishart_df, &hp.wishart_scale_inv)?;
    Ok(terms)
}

/// Log of the joint density up to the constant of the improper MCAR prior.
pub fn log_joint(
    state: &ModelState,
    data: &Dataset,
    nu0: f64,
    hp: &Hyperparams,
    graph: &NeighborGraph,
) -> Result<f64> {
    Ok(log_joint_terms(state, data, nu0, hp, graph)?.total())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_graph, LatticeMask};

    #[test]
    fn zero_predictor_gives_half() {
        let eta = linear_predictor(&[1.0, 2.0, -3.0, 0.5], 2, &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(eta, vec![0.0, 0.0]);
        assert_eq!(normal::cdf(eta[0]), 0.5);
    }

    #[test]
    fn predictor_arithmetic() {
        let eta = linear_predictor(&[1.0, 2.0], 2, &[0.5, -0.25], 1.0).unwrap();
        assert_eq!(eta, vec![1.0]);
        assert!(linear_predictor(&[1.0, 2.0], 2, &[0.5], 1.0).is_err());
    }

    #[test]
    fn default_hyperparams_validate() {
        let hp = Hyperparams::new(2);
        hp.validate().unwrap();
        assert_eq!(hp.nu0_sequence.len(), 15);
        assert!((hp.nu0_sequence[0] - (-1f64).exp()).abs() < 1e-15);
        assert!((hp.smallest_nu0() - (-20f64).exp()).abs() < 1e-20);
        let mut bad = hp.clone();
        bad.nu0_sequence = vec![20.0, 1.0];
        assert!(bad.validate().is_err());
        let mut bad = hp.clone();
        bad.nu0_sequence = vec![0.1, 0.2];
        assert!(bad.validate().is_err());
        let mut bad = hp;
        bad.wishart_df = 1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mcar_vanishes_for_single_voxel_and_constant_theta() {
        let mask = LatticeMask::full(&[1, 1]).unwrap();
        let g = build_graph(&mask).unwrap();
        let omega = Mat::identity(2, 2) * 3.0;
        assert_eq!(mcar_quadratic(&[1.0, -2.0], &omega, &g), 0.0);

        let mask = LatticeMask::full(&[4, 3]).unwrap();
        let g = build_graph(&mask).unwrap();
        let theta: Vec<f64> = (0..12).flat_map(|_| [0.7, -1.3]).collect();
        let omega = Mat::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert_eq!(mcar_quadratic(&theta, &omega, &g), 0.0);
    }

    #[test]
    fn non_pd_precision_is_rejected() {
        let mask = LatticeMask::full(&[2, 1]).unwrap();
        let g = build_graph(&mask).unwrap();
        let data = Dataset::new(1, 2, vec![0, 1], vec![1.0], vec!["x".into()]).unwrap();
        let state = ModelState {
            beta: vec![0.0; 2],
            beta0: vec![0.0; 2],
            gamma: vec![0.5; 2],
            theta: vec![0.0; 2],
            sigma_inv: Mat::from_row_slice(1, 1, &[-1.0]),
            z: None,
        };
        let err = log_joint(&state, &data, 0.01, &Hyperparams::new(1), &g).unwrap_err();
        assert!(err.to_string().contains("precision not positive definite"));
    }
}
