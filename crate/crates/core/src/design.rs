//! Grouping of subjects by identical covariate rows.
//!
//! Every likelihood in the crate depends on a subject only through its
//! covariate row and response, so subjects sharing a row can be pooled. With
//! binary covariates this turns N-length loops into loops over a handful of
//! patterns.

use std::collections::HashMap;

use crate::model::Dataset;

#[derive(Clone, Debug)]
pub struct DesignPatterns {
    p: usize,
    rows: Vec<f64>,
    of_subject: Vec<usize>,
    sizes: Vec<usize>,
}

impl DesignPatterns {
    pub fn new(data: &Dataset) -> Self {
        Self::from_rows(data.x(), data.n_covariates(), data.n_subjects())
    }

    pub fn from_rows(x: &[f64], p: usize, n: usize) -> Self {
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut rows = Vec::new();
        let mut of_subject = Vec::with_capacity(n);
        let mut sizes = Vec::new();
        for i in 0..n {
            let row = &x[i * p..(i + 1) * p];
            // +0.0 folds −0.0 into 0.0 so equal values share a key
            let key: Vec<u64> = row.iter().map(|v| (v + 0.0).to_bits()).collect();
            let k = *index.entry(key).or_insert_with(|| {
                rows.extend_from_slice(row);
                sizes.push(0);
                sizes.len() - 1
            });
            sizes[k] += 1;
            of_subject.push(k);
        }
        DesignPatterns {
            p,
            rows,
            of_subject,
            sizes,
        }
    }

    pub fn n_patterns(&self) -> usize {
        self.sizes.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.rows[k * self.p..(k + 1) * self.p]
    }

    pub fn pattern_of(&self, i: usize) -> usize {
        self.of_subject[i]
    }

    pub fn size(&self, k: usize) -> usize {
        self.sizes[k]
    }

    /// Per-pattern (weight of y = 1, weight of y = 0) for one voxel, written
    /// interleaved into `out` (length 2K).
    pub fn voxel_counts(&self, y: &[u8], weights: Option<&[f64]>, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        match weights {
            Some(w) => {
                for (i, (&yi, &wi)) in y.iter().zip(w).enumerate() {
                    out[2 * self.of_subject[i] + (1 - yi as usize)] += wi;
                }
            }
            None => {
                for (i, &yi) in y.iter().enumerate() {
                    out[2 * self.of_subject[i] + (1 - yi as usize)] += 1.0;
                }
            }
        }
    }

    /// Total weight per pattern.
    pub fn pattern_weights(&self, weights: Option<&[f64]>) -> Vec<f64> {
        let mut out = vec![0.0; self.n_patterns()];
        for i in 0..self.of_subject.len() {
            out[self.of_subject[i]] += weights.map_or(1.0, |w| w[i]);
        }
        out
    }
}
