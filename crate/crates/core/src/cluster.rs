//! Cluster-size inference and cluster-size mapping from a bootstrap ensemble.

use rayon::prelude::*;

use crate::bootstrap::PosteriorEnsemble;
use crate::error::{BlessError, Result};
use crate::lattice::{Components, NeighborGraph};

/// Default cluster-defining threshold.
pub const DEFAULT_CDT: f64 = 2.3;

/// Active where t > cdt (or |t| > cdt when two-sided); NaN is inactive.
pub fn threshold_statmap(tstat: &[f64], cdt: f64, two_sided: bool) -> Vec<bool> {
    tstat
        .iter()
        .map(|&t| if two_sided { t.abs() > cdt } else { t > cdt })
        .collect()
}

/// Size of the component containing each voxel, 0 where inactive.
pub fn voxel_cluster_sizes(comps: &Components) -> Vec<usize> {
    comps
        .labels
        .iter()
        .map(|l| l.map_or(0, |id| comps.sizes[id]))
        .collect()
}

/// Equal-tailed interval by linear interpolation between order statistics.
pub fn equal_tailed_interval(values: &[f64], level: f64) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let i = pos.floor() as usize;
        let t = pos - i as f64;
        if i + 1 < v.len() {
            v[i] + t * (v[i + 1] - v[i])
        } else {
            v[i]
        }
    };
    let tail = 0.5 * (1.0 - level);
    (q(tail), q(1.0 - tail))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterSummary {
    pub id: usize,
    pub observed_size: usize,
    pub members: Vec<usize>,
    /// One value per replicate, in ensemble order.
    pub distribution: Vec<usize>,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterReport {
    pub covariate: usize,
    pub cdt: f64,
    pub level: f64,
    pub two_sided: bool,
    pub clusters: Vec<ClusterSummary>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterOptions {
    pub cdt: f64,
    pub level: f64,
    pub two_sided: bool,
    pub prevalence_cut: f64,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        ClusterOptions {
            cdt: DEFAULT_CDT,
            level: 0.95,
            two_sided: false,
            prevalence_cut: 0.5,
        }
    }
}

/// Replicate r of covariate k standardized by the ensemble sd.
fn standardized(ens: &PosteriorEnsemble, r: usize, k: usize) -> Vec<f64> {
    let s = ens.sample(r);
    (0..ens.m)
        .map(|j| {
            let sd = ens.sd[j * ens.p + k];
            if sd > 0.0 {
                s[j * ens.p + k] / sd
            } else {
                f64::NAN
            }
        })
        .collect()
}

fn check(ens: &PosteriorEnsemble, k: usize, graph: &NeighborGraph) -> Result<()> {
    if k >= ens.p {
        return Err(BlessError::Invalid(format!("covariate {k} out of range (P = {})", ens.p)));
    }
    if graph.n_voxels() != ens.m {
        return Err(BlessError::Dimension(format!(
            "ensemble has {} voxels, graph {}",
            ens.m,
            graph.n_voxels()
        )));
    }
    if ens.n_replicates() < 50 {
        return Err(BlessError::Invalid(format!(
            "cluster inference needs at least 50 replicates, got {}",
            ens.n_replicates()
        )));
    }
    Ok(())
}

pub fn cluster_size_inference(
    ens: &PosteriorEnsemble,
    k: usize,
    graph: &NeighborGraph,
    opts: &ClusterOptions,
) -> Result<ClusterReport> {
    check(ens, k, graph)?;
    let t_obs = PosteriorEnsemble::column(&ens.tstat, ens.p, k);
    let observed = graph.connected_components(&threshold_statmap(&t_obs, opts.cdt, opts.two_sided));
    let members: Vec<Vec<usize>> = (0..observed.sizes.len()).map(|c| observed.members(c)).collect();

    // dist[r][c]: summed size of replicate r's clusters touching observed cluster c.
    let dist: Vec<Vec<usize>> = (0..ens.n_replicates())
        .into_par_iter()
        .map(|r| {
            let active = threshold_statmap(&standardized(ens, r, k), opts.cdt, opts.two_sided);
            let comps = graph.connected_components(&active);
            members
                .iter()
                .map(|mem| {
                    let mut ids: Vec<usize> = mem.iter().filter_map(|&j| comps.labels[j]).collect();
                    ids.sort_unstable();
                    ids.dedup();
                    ids.iter().map(|&id| comps.sizes[id]).sum()
                })
                .collect()
        })
        .collect();

    let b = ens.n_replicates() as f64;
    let clusters = members
        .into_iter()
        .enumerate()
        .map(|(c, mem)| {
            let distribution: Vec<usize> = dist.iter().map(|d| d[c]).collect();
            let vals: Vec<f64> = distribution.iter().map(|&v| v as f64).collect();
            let (lo, hi) = equal_tailed_interval(&vals, opts.level);
            let mean = vals.iter().sum::<f64>() / b;
            let sd = if b > 1.0 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b - 1.0)).sqrt()
            } else {
                0.0
            };
            ClusterSummary {
                id: c,
                observed_size: observed.sizes[c],
                members: mem,
                distribution,
                ci_lower: lo,
                ci_upper: hi,
                mean,
                sd,
            }
        })
        .collect();
    Ok(ClusterReport {
        covariate: k,
        cdt: opts.cdt,
        level: opts.level,
        two_sided: opts.two_sided,
        clusters,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterMaps {
    pub prevalence: Vec<f64>,
    /// NaN where prevalence does not exceed the cut.
    pub size_mean: Vec<f64>,
    pub size_sd: Vec<f64>,
}

pub fn cluster_size_mapping(
    ens: &PosteriorEnsemble,
    k: usize,
    graph: &NeighborGraph,
    opts: &ClusterOptions,
) -> Result<ClusterMaps> {
    check(ens, k, graph)?;
    let m = ens.m;
    // Integer accumulators keep the reduction exact and order independent.
    let (count, sum, sumsq) = (0..ens.n_replicates())
        .into_par_iter()
        .map(|r| {
            let active = threshold_statmap(&standardized(ens, r, k), opts.cdt, opts.two_sided);
            let sizes = voxel_cluster_sizes(&graph.connected_components(&active));
            let count: Vec<u64> = active.iter().map(|&a| a as u64).collect();
            let sum: Vec<u64> = sizes.iter().map(|&s| s as u64).collect();
            let sumsq: Vec<u64> = sizes.iter().map(|&s| (s * s) as u64).collect();
            (count, sum, sumsq)
        })
        .reduce(
            || (vec![0u64; m], vec![0u64; m], vec![0u64; m]),
            |mut a, b| {
                for j in 0..m {
                    a.0[j] += b.0[j];
                    a.1[j] += b.1[j];
                    a.2[j] += b.2[j];
                }
                a
            },
        );
    let b = ens.n_replicates() as f64;
    let prevalence: Vec<f64> = count.iter().map(|&c| c as f64 / b).collect();
    let mut size_mean = vec![f64::NAN; m];
    let mut size_sd = vec![f64::NAN; m];
    for j in 0..m {
        if prevalence[j] > opts.prevalence_cut {
            let mean = sum[j] as f64 / b;
            size_mean[j] = mean;
            size_sd[j] = if b > 1.0 {
                ((sumsq[j] as f64 - b * mean * mean) / (b - 1.0)).max(0.0).sqrt()
            } else {
                0.0
            };
        }
    }
    Ok(ClusterMaps {
        prevalence,
        size_mean,
        size_sd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_graph, LatticeMask};
    use crate::normal;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn ensemble_from(m: usize, reps: &[Vec<f64>]) -> PosteriorEnsemble {
        let samples: Vec<f64> = reps.iter().flatten().copied().collect();
        PosteriorEnsemble::from_samples(m, 1, (0..reps.len()).collect(), samples).unwrap()
    }

    #[test]
    fn threshold_is_strict_and_nan_inactive() {
        assert_eq!(threshold_statmap(&[2.3, 2.31, f64::NAN, -3.0], 2.3, false), vec![false, true, false, false]);
        assert_eq!(threshold_statmap(&[2.3, 2.31, f64::NAN, -3.0], 2.3, true), vec![false, true, false, true]);
        assert!(threshold_statmap(&[0.0; 5], 2.3, false).iter().all(|a| !a));
        // One-sided tail probability at 2.3.
        assert!((1.0 - normal::cdf(2.3) - 0.0107).abs() < 1e-4);
    }

    #[test]
    fn interval_of_constant_and_ramp() {
        assert_eq!(equal_tailed_interval(&[1.0; 60], 0.95), (1.0, 1.0));
        let ramp: Vec<f64> = (0..=100).map(|v| v as f64).collect();
        let (lo, hi) = equal_tailed_interval(&ramp, 0.9);
        assert!((lo - 5.0).abs() < 1e-12 && (hi - 95.0).abs() < 1e-12);
    }

    // Noise of sd 1 around 0 plus one voxel at +10: every replicate's
    // standardized value there is far above threshold.
    #[test]
    fn single_voxel_cluster_reproduced_everywhere() {
        let mask = LatticeMask::full(&[3, 3]).unwrap();
        let g = build_graph(&mask).unwrap();
        let reps: Vec<Vec<f64>> = (0..60)
            .map(|r| {
                let mut v: Vec<f64> = (0..9).map(|j| if (r + j) % 2 == 0 { 0.01 } else { -0.01 }).collect();
                v[4] = 10.0 + if r % 2 == 0 { 0.1 } else { -0.1 };
                v
            })
            .collect();
        let ens = ensemble_from(9, &reps);
        let rep = cluster_size_inference(&ens, 0, &g, &ClusterOptions::default()).unwrap();
        assert_eq!(rep.clusters.len(), 1);
        let c = &rep.clusters[0];
        assert_eq!((c.observed_size, c.members.clone()), (1, vec![4]));
        assert!(c.distribution.iter().all(|&d| d == 1));
        assert_eq!((c.ci_lower, c.ci_upper), (1.0, 1.0));
    }

    #[test]
    fn no_observed_clusters_gives_empty_report() {
        let g = build_graph(&LatticeMask::full(&[2, 2]).unwrap()).unwrap();
        let reps: Vec<Vec<f64>> = (0..50).map(|r| vec![(r % 3) as f64 - 1.0; 4]).collect();
        let rep = cluster_size_inference(&ensemble_from(4, &reps), 0, &g, &ClusterOptions::default()).unwrap();
        assert!(rep.clusters.is_empty());
        assert!(cluster_size_inference(&ensemble_from(4, &reps[..10]), 0, &g, &ClusterOptions::default()).is_err());
    }

    fn planted(seed: u64, b: usize) -> (LatticeMask, PosteriorEnsemble) {
        let mask = LatticeMask::full(&[20, 20]).unwrap();
        let mut r = rng::stream(seed, 99, 0, 0);
        let reps: Vec<Vec<f64>> = (0..b)
            .map(|_| {
                (0..400)
                    .map(|j| {
                        let c = mask.coords(j);
                        let inside = (6..14).contains(&c[0]) && (6..14).contains(&c[1]);
                        let edge = inside && (c[0] == 6 || c[0] == 13 || c[1] == 6 || c[1] == 13);
                        let mu = if edge { 2.0 } else if inside { 6.0 } else { 0.0 };
                        let e: f64 = r.sample(rand_distr::StandardNormal);
                        mu + e
                    })
                    .collect()
            })
            .collect();
        (mask, ensemble_from(400, &reps))
    }

    fn flood_sizes(active: &[bool], dims: [usize; 2]) -> Vec<usize> {
        let mut size = vec![0; active.len()];
        let mut seen = vec![false; active.len()];
        for s in 0..active.len() {
            if !active[s] || seen[s] {
                continue;
            }
            let mut stack = vec![s];
            let mut comp = vec![];
            seen[s] = true;
            while let Some(v) = stack.pop() {
                comp.push(v);
                let (x, y) = (v % dims[0], v / dims[0]);
                let mut nb = vec![];
                if x > 0 { nb.push(v - 1); }
                if x + 1 < dims[0] { nb.push(v + 1); }
                if y > 0 { nb.push(v - dims[0]); }
                if y + 1 < dims[1] { nb.push(v + dims[0]); }
                for w in nb {
                    if active[w] && !seen[w] {
                        seen[w] = true;
                        stack.push(w);
                    }
                }
            }
            for &v in &comp {
                size[v] = comp.len();
            }
        }
        size
    }

    #[test]
    fn planted_block_matches_brute_force() {
        let (mask, ens) = planted(5, 100);
        let g = build_graph(&mask).unwrap();
        let opts = ClusterOptions::default();
        let rep = cluster_size_inference(&ens, 0, &g, &opts).unwrap();
        let observed: Vec<bool> = ens.tstat.iter().map(|&t| t > 2.3).collect();
        assert_eq!(rep.clusters.iter().map(|c| c.observed_size).sum::<usize>(), observed.iter().filter(|&&a| a).count());
        let big = &rep.clusters[0];
        for r in 0..100 {
            let z: Vec<bool> = (0..400).map(|j| ens.sample(r)[j] / ens.sd[j] > 2.3).collect();
            let sizes = flood_sizes(&z, [20, 20]);
            // Sum over distinct components touching the observed cluster.
            let mut seen = vec![false; 400];
            let mut total = 0;
            for &j in &big.members {
                if z[j] && !seen[j] {
                    let comp_size = sizes[j];
                    let mut stack = vec![j];
                    seen[j] = true;
                    while let Some(v) = stack.pop() {
                        for &w in g.neighbors(v) {
                            if z[w] && !seen[w] {
                                seen[w] = true;
                                stack.push(w);
                            }
                        }
                    }
                    total += comp_size;
                }
            }
            assert_eq!(big.distribution[r], total, "replicate {r}");
        }
        let vals: Vec<f64> = big.distribution.iter().map(|&v| v as f64).collect();
        assert_eq!(equal_tailed_interval(&vals, 0.95), (big.ci_lower, big.ci_upper));

        let maps = cluster_size_mapping(&ens, 0, &g, &opts).unwrap();
        for j in 0..400 {
            let c = mask.coords(j);
            if (7..13).contains(&c[0]) && (7..13).contains(&c[1]) {
                assert!(maps.prevalence[j] > 0.95);
                assert!(maps.size_mean[j].is_finite());
            }
            let far = c[0] < 2 || c[0] > 17 || c[1] < 2 || c[1] > 17;
            if far {
                assert!(maps.prevalence[j] < 0.05);
                assert!(maps.size_mean[j].is_nan());
            }
        }
    }

    #[test]
    fn identical_replicates_give_binary_prevalence() {
        let g = build_graph(&LatticeMask::full(&[4, 4]).unwrap()).unwrap();
        let base: Vec<f64> = (0..16).map(|j| if j % 4 < 2 { 5.0 } else { -1.0 }).collect();
        // sd must be positive, so alternate a tiny jitter that keeps every sign.
        let reps: Vec<Vec<f64>> = (0..50)
            .map(|r| base.iter().map(|v| v * if r % 2 == 0 { 1.0 } else { 1.001 }).collect())
            .collect();
        let ens = ensemble_from(16, &reps);
        let maps = cluster_size_mapping(&ens, 0, &g, &ClusterOptions::default()).unwrap();
        assert!(maps.prevalence.iter().all(|&p| p == 0.0 || p == 1.0));
        for j in 0..16 {
            if maps.prevalence[j] == 1.0 {
                assert_eq!(maps.size_sd[j], 0.0);
                assert_eq!(maps.size_mean[j], 8.0);
            }
        }
    }

    #[test]
    fn prevalence_counts_replicates() {
        let g = build_graph(&LatticeMask::full(&[1, 1]).unwrap()).unwrap();
        let reps: Vec<Vec<f64>> = (0..100).map(|r| vec![if r < 60 { 3.0 } else { 0.5 }]).collect();
        let ens = ensemble_from(1, &reps);
        // Ensemble sd is 1.2309, so 3.0 standardizes to 2.44 > 2.3 and 0.5 to 0.41.
        let maps = cluster_size_mapping(&ens, 0, &g, &ClusterOptions::default()).unwrap();
        assert_eq!(maps.prevalence[0], 0.6);
    }

    proptest! {
        #[test]
        fn higher_threshold_never_grows(seed in 0u64..1000, lo in 0.5f64..2.0, gap in 0.0f64..2.0) {
            let (mask, ens) = planted(seed, 50);
            let g = build_graph(&mask).unwrap();
            let a = ClusterOptions { cdt: lo, ..Default::default() };
            let b = ClusterOptions { cdt: lo + gap, ..Default::default() };
            let (ma, mb) = (cluster_size_mapping(&ens, 0, &g, &a).unwrap(), cluster_size_mapping(&ens, 0, &g, &b).unwrap());
            for j in 0..400 {
                prop_assert!(mb.prevalence[j] <= ma.prevalence[j]);
            }
            let sa = voxel_cluster_sizes(&g.connected_components(&threshold_statmap(&ens.tstat, lo, false)));
            let sb = voxel_cluster_sizes(&g.connected_components(&threshold_statmap(&ens.tstat, lo + gap, false)));
            for j in 0..400 {
                prop_assert!(sb[j] <= sa[j]);
            }
            // Replicate order does not matter.
            let mut rev = ens.clone();
            let mp = 400;
            let mut samples = Vec::with_capacity(rev.samples.len());
            for r in (0..50).rev() {
                samples.extend_from_slice(&ens.samples[r * mp..(r + 1) * mp]);
            }
            rev.samples = samples;
            let ra = cluster_size_inference(&ens, 0, &g, &a).unwrap();
            let rb = cluster_size_inference(&rev, 0, &g, &a).unwrap();
            for (x, y) in ra.clusters.iter().zip(&rb.clusters) {
                let mut dx = x.distribution.clone();
                let mut dy = y.distribution.clone();
                dx.sort_unstable();
                dy.sort_unstable();
                prop_assert_eq!(dx, dy);
                prop_assert_eq!((x.ci_lower, x.ci_upper), (y.ci_lower, y.ci_upper));
            }
        }
    }
}
