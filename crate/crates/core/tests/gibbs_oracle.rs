mod common;

use bless::gibbs::{chain_summary, run_gibbs, GibbsConfig, GibbsMode};
use bless::linalg::Mat;
use bless::model::ModelState;
use common::*;

#[test]
fn enumeration_probabilities_sum_to_one() {
    let (data, _, hp, nu0, theta) = tiny_line();
    let post = gamma_posterior(&data, &hp, nu0, &theta);
    eprintln!("exact posterior {post:?}");
    assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    // The second voxel has no association with x, so it favours the spike more.
    let p1 = |j: usize| post.iter().enumerate().filter(|(s, _)| s >> j & 1 == 1).map(|(_, v)| v).sum::<f64>();
    assert!(p1(0) > p1(1), "{} vs {}", p1(0), p1(1));
}

#[test]
fn augmented_chain_matches_gamma_enumeration() {
    let tv = tiny_gamma_tv(GibbsMode::Augmented, 40_000, 11);
    eprintln!("TV = {tv:.4}");
    assert!(tv < 0.05, "TV = {tv}");
}

#[test]
fn collapsed_chain_matches_gamma_enumeration() {
    let tv = tiny_gamma_tv(GibbsMode::Collapsed, 40_000, 12);
    eprintln!("TV = {tv:.4}");
    assert!(tv < 0.05, "TV = {tv}");
}

#[test]
fn single_voxel_chain_mean_matches_grid() {
    let (data, graph, hp) = single_voxel();
    let (mean, _) = voxel_posterior_moments(data.x(), data.y_voxel(0), hp.nu1, hp.sigma0_sq);
    for (mode, seed) in [(GibbsMode::Augmented, 3), (GibbsMode::Collapsed, 4)] {
        let mut cfg = GibbsConfig::new(30_000, 3_000, seed);
        cfg.mode = mode;
        cfg.freeze_theta = true;
        cfg.freeze_precision = true;
        let init = ModelState {
            beta: vec![0.0],
            beta0: vec![0.0],
            gamma: vec![1.0],
            theta: vec![0.0],
            sigma_inv: Mat::identity(1, 1),
            z: None,
        };
        let chain = run_gibbs(&data, &hp, hp.nu1, &graph, &cfg, &init).unwrap();
        let s = chain_summary(&chain).unwrap();
        let mcse = s.sd[0] / s.ess[0].sqrt();
        assert!((s.mean[0] - mean).abs() < 3.0 * mcse, "{mode:?}: {} vs grid {mean} (MCSE {mcse})", s.mean[0]);
    }
}
