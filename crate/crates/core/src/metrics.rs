//! Recovery and estimation metrics against a known truth, and distances
//! between posterior sample sets.

use rayon::prelude::*;

use crate::error::{BlessError, Result};

/// Confusion counts and the four rates; a rate with a zero denominator is `None`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConfusionRates {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub tpr: Option<f64>,
    pub tdr: Option<f64>,
    pub fpr: Option<f64>,
    pub fdr: Option<f64>,
}

fn ratio(a: usize, b: usize) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

pub fn confusion_rates(est: &[bool], truth: &[bool]) -> Result<ConfusionRates> {
    if est.len() != truth.len() {
        return Err(BlessError::Dimension(format!(
            "{} estimates vs {} truth flags",
            est.len(),
            truth.len()
        )));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&e, &t) in est.iter().zip(truth) {
        match (e, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(ConfusionRates {
        tp,
        fp,
        tn,
        fn_,
        tpr: ratio(tp, tp + fn_),
        tdr: ratio(tp, tp + fp),
        fpr: ratio(fp, fp + tn),
        fdr: ratio(fp, tp + fp),
    })
}

/// Per-voxel bias, replicate variance (denominator R) and MSE.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasVarMse {
    pub bias: Vec<f64>,
    pub variance: Vec<f64>,
    pub mse: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub n_voxels: usize,
    pub bias: f64,
    pub variance: f64,
    pub mse: f64,
}

impl BiasVarMse {
    /// Averages over the voxels where `set` is true (all voxels if `None`).
    pub fn aggregate(&self, set: Option<&[bool]>) -> Aggregate {
        let idx: Vec<usize> = (0..self.bias.len())
            .filter(|&j| set.is_none_or(|s| s[j]))
            .collect();
        let k = idx.len() as f64;
        let avg = |v: &[f64]| {
            if idx.is_empty() {
                f64::NAN
            } else {
                idx.iter().map(|&j| v[j]).sum::<f64>() / k
            }
        };
        Aggregate {
            n_voxels: idx.len(),
            bias: avg(&self.bias),
            variance: avg(&self.variance),
            mse: avg(&self.mse),
        }
    }
}

/// `estimates[r]` is replicate r's M-vector.
pub fn bias_var_mse(estimates: &[Vec<f64>], truth: &[f64]) -> Result<BiasVarMse> {
    if estimates.len() < 2 {
        return Err(BlessError::Invalid("bias/variance/MSE needs at least 2 replicates".into()));
    }
    let m = truth.len();
    if estimates.iter().any(|e| e.len() != m) {
        return Err(BlessError::Dimension(format!("replicate estimates must have {m} entries")));
    }
    let r = estimates.len() as f64;
    let cols: Vec<(f64, f64, f64)> = (0..m)
        .into_par_iter()
        .map(|j| {
            let mean = estimates.iter().map(|e| e[j]).sum::<f64>() / r;
            let var = estimates.iter().map(|e| (e[j] - mean).powi(2)).sum::<f64>() / r;
            let mse = estimates.iter().map(|e| (e[j] - truth[j]).powi(2)).sum::<f64>() / r;
            (mean - truth[j], var, mse)
        })
        .collect();
    Ok(BiasVarMse {
        bias: cols.iter().map(|c| c.0).collect(),
        variance: cols.iter().map(|c| c.1).collect(),
        mse: cols.iter().map(|c| c.2).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Distance {
    /// KL(a‖b) between moment-matched Gaussians; `None` if either variance is 0.
    pub kl: Option<f64>,
    pub w1: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

pub fn gaussian_kl(mean_a: f64, var_a: f64, mean_b: f64, var_b: f64) -> f64 {
    0.5 * ((var_b / var_a).ln() + (var_a + (mean_a - mean_b).powi(2)) / var_b - 1.0)
}

/// Mean absolute difference of quantile-matched order statistics; the larger
/// sample is linearly interpolated at the smaller sample's plotting positions.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> f64 {
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let (small, large) = if sa.len() <= sb.len() { (sa, sb) } else { (sb, sa) };
    let n = small.len();
    let big = large.len();
    let at = |q: f64| -> f64 {
        let pos = q * (big - 1) as f64;
        let i = (pos.floor() as usize).min(big - 1);
        let t = pos - i as f64;
        if i + 1 < big {
            large[i] * (1.0 - t) + large[i + 1] * t
        } else {
            large[i]
        }
    };
    let total: f64 = small
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let q = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
            let w = if n == big { large[i] } else { at(q) };
            (v - w).abs()
        })
        .sum();
    total / n as f64
}

pub fn posterior_distance(a: &[f64], b: &[f64]) -> Result<Distance> {
    if a.len() < 30 || b.len() < 30 {
        return Err(BlessError::Invalid(format!(
            "posterior distance needs at least 30 samples each, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let kl = (va > 0.0 && vb > 0.0).then(|| {
        if a == b {
            0.0
        } else {
            gaussian_kl(ma, va, mb, vb)
        }
    });
    Ok(Distance {
        kl,
        w1: wasserstein1(a, b),
    })
}

/// Median of the finite entries; NaN if there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
