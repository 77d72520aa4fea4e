//! Dataset directories:
//!
//! - `mask.blsv`: u8, one volume, the analysis mask
//! - `lesions.blsv`: u8, one volume per subject
//! - `covariates.csv`: one column per covariate, one row per subject
//! - `truth_coef.blsv`, `truth_active.blsv`, `truth_intercept.blsv`: optional
//!   ground truth (simulated data only), one volume per covariate

use std::path::Path;

use crate::error::{BlessError, Result};
use crate::lattice::LatticeMask;
use crate::model::Dataset;
use crate::sim::SimTruth;

use super::tables::{fmt, parse_f64, read_table, write_table};
use super::volume::{read_volume, write_volume, Volume};

pub const MASK: &str = "mask.blsv";
pub const LESIONS: &str = "lesions.blsv";
pub const COVARIATES: &str = "covariates.csv";
pub const TRUTH_COEF: &str = "truth_coef.blsv";
pub const TRUTH_ACTIVE: &str = "truth_active.blsv";
pub const TRUTH_INTERCEPT: &str = "truth_intercept.blsv";

#[derive(Clone, Debug, PartialEq)]
pub struct TruthMaps {
    /// M×P row-major.
    pub coef: Vec<f64>,
    /// Per covariate, M flags.
    pub active: Vec<Vec<bool>>,
    pub intercept: Vec<f64>,
}

impl TruthMaps {
    pub fn coef_map(&self, k: usize) -> Vec<f64> {
        let p = self.active.len();
        (0..self.intercept.len()).map(|j| self.coef[j * p + k]).collect()
    }
}

impl From<&SimTruth> for TruthMaps {
    fn from(t: &SimTruth) -> Self {
        TruthMaps {
            coef: t.coef.clone(),
            active: t.active.clone(),
            intercept: t.intercept.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DatasetDir {
    pub mask: LatticeMask,
    pub data: Dataset,
    pub truth: Option<TruthMaps>,
}

pub fn write_dataset(dir: &Path, mask: &LatticeMask, data: &Dataset, truth: Option<&TruthMaps>) -> Result<()> {
    let (n, m, p) = (data.n_subjects(), data.n_voxels(), data.n_covariates());
    if mask.n_voxels() != m {
        return Err(BlessError::Dimension(format!("mask has {} voxels, data {m}", mask.n_voxels())));
    }
    let inside: Vec<u8> = mask.inside().iter().map(|&b| b as u8).collect();
    write_volume(&dir.join(MASK), &Volume::new_u8(mask.dims(), 1, inside)?)?;
    let mut lesions = Vec::with_capacity(n * mask.n_sites());
    for i in 0..n {
        let dense: Vec<u8> = (0..m).map(|j| data.y(i, j)).collect();
        lesions.extend(mask.scatter(&dense, 0));
    }
    write_volume(&dir.join(LESIONS), &Volume::new_u8(mask.dims(), n, lesions)?)?;
    let header: Vec<&str> = data.names().iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = (0..n).map(|i| data.x_row(i).iter().map(|&v| fmt(v)).collect()).collect();
    write_table(&dir.join(COVARIATES), &header, &rows)?;
    if let Some(t) = truth {
        let coef: Vec<Vec<f64>> = (0..p).map(|k| t.coef_map(k)).collect();
        write_volume(&dir.join(TRUTH_COEF), &Volume::from_maps(mask, &coef)?)?;
        write_volume(&dir.join(TRUTH_ACTIVE), &Volume::from_binary_maps(mask, &t.active)?)?;
        write_volume(&dir.join(TRUTH_INTERCEPT), &Volume::from_maps(mask, std::slice::from_ref(&t.intercept))?)?;
    }
    Ok(())
}

pub fn read_mask(dir: &Path) -> Result<LatticeMask> {
    let path = dir.join(MASK);
    let v = read_volume(&path)?;
    if v.count != 1 {
        return Err(BlessError::format(&path, "mask must hold exactly one volume"));
    }
    let inside = v.volume_u8(0).map_err(|e| BlessError::format(&path, e.to_string()))?;
    LatticeMask::new(&v.dims, inside.iter().map(|&b| b != 0).collect())
}

pub fn read_dataset(dir: &Path) -> Result<DatasetDir> {
    let mask = read_mask(dir)?;
    let m = mask.n_voxels();
    let lpath = dir.join(LESIONS);
    let les = read_volume(&lpath)?;
    if les.dims != mask.dims() {
        return Err(BlessError::format(
            &lpath,
            format!("lesion dims {:?} differ from mask dims {:?}", les.dims, mask.dims()),
        ));
    }
    let n = les.count;
    let mut y = Vec::with_capacity(n * m);
    for i in 0..n {
        let vol = les.volume_u8(i).map_err(|e| BlessError::format(&lpath, e.to_string()))?;
        if vol.iter().any(|&b| b > 1) {
            return Err(BlessError::format(&lpath, format!("subject {i} is not binary")));
        }
        y.extend(mask.gather(&vol));
    }
    let cpath = dir.join(COVARIATES);
    let (names, rows) = read_table(&cpath)?;
    if rows.len() != n {
        return Err(BlessError::format(
            &cpath,
            format!("{} covariate rows for {n} lesion volumes", rows.len()),
        ));
    }
    let mut x = Vec::with_capacity(n * names.len());
    for r in &rows {
        if r.len() != names.len() {
            return Err(BlessError::format(&cpath, "ragged covariate row"));
        }
        for v in r {
            x.push(parse_f64(v, &cpath)?);
        }
    }
    let data = Dataset::from_subject_major(n, m, &y, x, names)?;
    let truth = if dir.join(TRUTH_COEF).exists() {
        let p = data.n_covariates();
        let coef_v = read_volume(&dir.join(TRUTH_COEF))?;
        let act_v = read_volume(&dir.join(TRUTH_ACTIVE))?;
        let int_v = read_volume(&dir.join(TRUTH_INTERCEPT))?;
        if coef_v.count != p || act_v.count != p || int_v.count != 1 {
            return Err(BlessError::format(dir, "truth volumes do not match the covariates"));
        }
        let maps: Vec<Vec<f64>> = (0..p).map(|k| mask.gather(&coef_v.volume_f64(k))).collect();
        let coef = (0..m).flat_map(|j| maps.iter().map(move |mk| mk[j])).collect();
        let active = (0..p)
            .map(|k| mask.gather(&act_v.volume_f64(k)).iter().map(|&v| v != 0.0).collect())
            .collect();
        Some(TruthMaps {
            coef,
            active,
            intercept: mask.gather(&int_v.volume_f64(0)),
        })
    } else {
        None
    };
    Ok(DatasetDir { mask, data, truth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_dataset, SimConfig};

    #[test]
    fn simulated_dataset_round_trips() {
        let mut cfg = SimConfig::new(30, 2.0, 4);
        cfg.dims = [10, 8];
        let sim = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let truth = TruthMaps::from(&sim.truth);
        write_dataset(dir.path(), &sim.mask, &sim.data, Some(&truth)).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.mask, sim.mask);
        assert_eq!(back.data, sim.data);
        assert_eq!(back.truth.unwrap(), truth);
    }

    #[test]
    fn partial_masks_keep_only_inside_voxels() {
        let mask = LatticeMask::new(&[3, 2], vec![true, false, true, true, true, false]).unwrap();
        let data = Dataset::new(2, 4, vec![1, 0, 0, 1, 1, 1, 0, 0], vec![0.5, -1.0], vec!["age".into()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &mask, &data, None).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.data, data);
        assert!(back.truth.is_none());
    }

    #[test]
    fn mismatched_files_are_reported() {
        let mask = LatticeMask::full(&[2, 2]).unwrap();
        let data = Dataset::new(1, 4, vec![0, 1, 0, 1], vec![1.0], vec!["x".into()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &mask, &data, None).unwrap();
        std::fs::write(dir.path().join(COVARIATES), "x\n1\n2\n").unwrap();
        let e = read_dataset(dir.path()).unwrap_err();
        assert!(e.to_string().contains("covariate rows"), "{e}");
        std::fs::remove_file(dir.path().join(MASK)).unwrap();
        assert!(matches!(read_dataset(dir.path()).unwrap_err(), BlessError::Io { .. }));
    }
}
