//! Synthetic lesion datasets with known ground truth.
//!
//! The lattice is split into rectangular regions. Each subject receives a
//! Poisson number of 3×3 lesions per region, centred uniformly inside it and
//! clipped at its border, so a voxel's lesion probability depends only on its
//! region, its cover count and the subject's covariates:
//! p = 1 − exp(−λ_r · c / A_r), c = number of admissible centres covering it.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use crate::error::{BlessError, Result};
use crate::lattice::LatticeMask;
use crate::model::Dataset;
use crate::normal;
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub enum Layout {
    /// Sex raises the rate on the right half, group on the lower-left quadrant.
    Quadrants,
    /// One covariate raises the rate inside `[lo, hi)`.
    Block { lo: [usize; 2], hi: [usize; 2] },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    /// Expected lesions per 25×25 area for a baseline subject.
    pub lambda: f64,
    pub dims: [usize; 2],
    pub seed: u64,
    pub layout: Layout,
    /// Rate multiplier of an effect.
    pub effect: f64,
}

impl SimConfig {
    pub fn new(n: usize, lambda: f64, seed: u64) -> Self {
        SimConfig {
            n,
            lambda,
            dims: [50, 50],
            seed,
            layout: Layout::Quadrants,
            effect: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(BlessError::Config("simulation needs at least one subject".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(BlessError::Config("lambda must be a non-negative number".into()));
        }
        if self.dims.iter().any(|&d| d < 2) {
            return Err(BlessError::Config("simulation dims must be at least 2".into()));
        }
        if !(self.effect > 0.0) {
            return Err(BlessError::Config("effect multiplier must be positive".into()));
        }
        if let Layout::Block { lo, hi } = &self.layout {
            for a in 0..2 {
                if lo[a] >= hi[a] || hi[a] > self.dims[a] {
                    return Err(BlessError::Config("block must lie inside the lattice".into()));
                }
            }
        }
        Ok(())
    }

    pub fn covariate_names(&self) -> Vec<String> {
        match self.layout {
            Layout::Quadrants => vec!["sex".into(), "group".into()],
            Layout::Block { .. } => vec!["x".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Region {
    lo: [usize; 2],
    hi: [usize; 2],
    /// Expected lesions for a baseline subject.
    rate: f64,
    /// Per-covariate multiplier when the covariate is 1.
    mult: Vec<f64>,
}

impl Region {
    fn area(&self) -> usize {
        (self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1])
    }

    fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.lo[0] && x < self.hi[0] && y >= self.lo[1] && y < self.hi[1]
    }

    fn rate_for(&self, cov: &[f64]) -> f64 {
        self.rate
            * self
                .mult
                .iter()
                .zip(cov)
                .map(|(m, &c)| if c != 0.0 { *m } else { 1.0 })
                .product::<f64>()
    }

    /// Centres within the region whose clipped block covers (x, y).
    fn cover(&self, x: usize, y: usize) -> usize {
        let span = |v: usize, a: usize| {
            let lo = v.saturating_sub(1).max(self.lo[a]);
            let hi = (v + 1).min(self.hi[a] - 1);
            hi + 1 - lo
        };
        span(x, 0) * span(y, 1)
    }
}

fn regions(cfg: &SimConfig) -> Vec<Region> {
    let [w, h] = cfg.dims;
    let density = cfg.lambda / 625.0;
    let mk = |lo: [usize; 2], hi: [usize; 2], mult: Vec<f64>| {
        let area = (hi[0] - lo[0]) * (hi[1] - lo[1]);
        Region {
            lo,
            hi,
            rate: density * area as f64,
            mult,
        }
    };
    match &cfg.layout {
        Layout::Quadrants => {
            let (hx, hy) = (w / 2, h / 2);
            let e = cfg.effect;
            vec![
                mk([0, 0], [hx, hy], vec![1.0, 1.0]),
                mk([hx, 0], [w, hy], vec![e, 1.0]),
                mk([0, hy], [hx, h], vec![1.0, e]),
                mk([hx, hy], [w, h], vec![e, 1.0]),
            ]
        }
        Layout::Block { lo, hi } => {
            let mut out = vec![mk(*lo, *hi, vec![cfg.effect])];
            let strips = [
                ([0, 0], [w, lo[1]]),
                ([0, hi[1]], [w, h]),
                ([0, lo[1]], [lo[0], hi[1]]),
                ([hi[0], lo[1]], [w, hi[1]]),
            ];
            for (a, b) in strips {
                if a[0] < b[0] && a[1] < b[1] {
                    out.push(mk(a, b, vec![1.0]));
                }
            }
            out
        }
    }
}

/// Ground truth of a simulated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SimTruth {
    pub names: Vec<String>,
    /// Per covariate, M flags of voxels whose rate depends on it.
    pub active: Vec<Vec<bool>>,
    /// True probit coefficients, M×P row-major.
    pub coef: Vec<f64>,
    pub intercept: Vec<f64>,
    /// Baseline lesion probability per voxel.
    pub baseline_prob: Vec<f64>,
}

impl SimTruth {
    pub fn coef_map(&self, k: usize) -> Vec<f64> {
        let p = self.names.len();
        (0..self.intercept.len()).map(|j| self.coef[j * p + k]).collect()
    }
}

#[derive(Clone, Debug)]
pub struct SimOutput {
    pub mask: LatticeMask,
    pub data: Dataset,
    pub truth: SimTruth,
}

fn lesion_prob(rate: f64, cover: usize, area: usize) -> f64 {
    -(-rate * cover as f64 / area as f64).exp_m1()
}

pub fn truth_for(cfg: &SimConfig) -> SimTruth {
    let [w, h] = cfg.dims;
    let regs = regions(cfg);
    let names = cfg.covariate_names();
    let p = names.len();
    let m = w * h;
    let mut active = vec![vec![false; m]; p];
    let mut coef = vec![0.0; m * p];
    let mut intercept = vec![0.0; m];
    let mut baseline_prob = vec![0.0; m];
    for y in 0..h {
        for x in 0..w {
            let j = y * w + x;
            let r = regs.iter().find(|r| r.contains(x, y)).expect("regions tile the lattice");
            let c = r.cover(x, y);
            let p0 = lesion_prob(r.rate, c, r.area());
            baseline_prob[j] = p0;
            intercept[j] = normal::quantile(p0);
            for k in 0..p {
                if r.mult[k] != 1.0 && r.rate > 0.0 {
                    active[k][j] = true;
                    let p1 = lesion_prob(r.rate * r.mult[k], c, r.area());
                    coef[j * p + k] = normal::quantile(p1) - normal::quantile(p0);
                }
            }
        }
    }
    SimTruth {
        names,
        active,
        coef,
        intercept,
        baseline_prob,
    }
}

pub fn generate_dataset(cfg: &SimConfig) -> Result<SimOutput> {
    cfg.validate()?;
    let [w, h] = cfg.dims;
    let m = w * h;
    let regs = regions(cfg);
    let names = cfg.covariate_names();
    let p = names.len();
    let subjects: Vec<(Vec<f64>, Vec<u8>)> = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(cfg.seed, rng::TAG_SIM, 0, i as u64);
            let cov: Vec<f64> = (0..p).map(|_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 }).collect();
            let mut img = vec![0u8; m];
            for r in &regs {
                let rate = r.rate_for(&cov);
                if rate <= 0.0 {
                    continue;
                }
                let k = Poisson::new(rate).expect("positive rate").sample(&mut rng) as usize;
                for _ in 0..k {
                    let cx = rng.random_range(r.lo[0]..r.hi[0]);
                    let cy = rng.random_range(r.lo[1]..r.hi[1]);
                    for y in cy.saturating_sub(1).max(r.lo[1])..=(cy + 1).min(r.hi[1] - 1) {
                        for x in cx.saturating_sub(1).max(r.lo[0])..=(cx + 1).min(r.hi[0] - 1) {
                            img[y * w + x] = 1;
                        }
                    }
                }
            }
            (cov, img)
        })
        .collect();
    let mut x = Vec::with_capacity(cfg.n * p);
    let mut y = Vec::with_capacity(cfg.n * m);
    for (cov, img) in subjects {
        x.extend(cov);
        y.extend(img);
    }
    let data = Dataset::from_subject_major(cfg.n, m, &y, x, names)?;
    Ok(SimOutput {
        mask: LatticeMask::full(&[w, h])?,
        data,
        truth: truth_for(cfg),
    })
}

/// Per-voxel lesion frequency over the subjects selected by `filter`.
pub fn empirical_rates(data: &Dataset, filter: &[bool]) -> Result<Vec<f64>> {
    if filter.len() != data.n_subjects() {
        return Err(BlessError::Dimension("subgroup filter length differs from N".into()));
    }
    let count = filter.iter().filter(|&&f| f).count();
    if count == 0 {
        return Err(BlessError::Invalid("empty subgroup".into()));
    }
    Ok((0..data.n_voxels())
        .map(|j| {
            data.y_voxel(j)
                .iter()
                .zip(filter)
                .filter(|(_, &f)| f)
                .map(|(&v, _)| v as f64)
                .sum::<f64>()
                / count as f64
        })
        .collect())
}
