//! Brute-force oracles shared by the integration and acceptance suites.

#![allow(dead_code)]

use bless::gibbs::{run_gibbs, GibbsConfig, GibbsMode};
use bless::lattice::{build_graph, LatticeMask, NeighborGraph};
use bless::linalg::Mat;
use bless::model::{Dataset, Hyperparams, ModelState};
use statrs::distribution::{ContinuousCDF, Normal};

pub fn ln_phi(x: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    if x < -30.0 {
        // Φ underflows; the leading asymptotic term is ample here.
        -0.5 * x * x - (-x).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    } else {
        n.cdf(x).ln()
    }
}

fn ln_norm(x: f64, var: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * x * x / var
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + v.iter().map(|t| (t - mx).exp()).sum::<f64>().ln()
}

/// Grid over (β, β0) for one voxel with one covariate: returns the log
/// weights (prior × likelihood × cell area) and the β value of each cell.
fn voxel_grid(x: &[f64], y: &[u8], beta_var: f64, sigma0_sq: f64, steps: usize) -> (Vec<f64>, Vec<f64>) {
    let bw = 9.0 * beta_var.sqrt();
    let cw = 9.0 * sigma0_sq.sqrt().min(4.0);
    let (hb, hc) = (2.0 * bw / steps as f64, 2.0 * cw / steps as f64);
    let mut lw = Vec::with_capacity(steps * steps);
    let mut at = Vec::with_capacity(steps * steps);
    for a in 0..steps {
        let b = -bw + (a as f64 + 0.5) * hb;
        for c in 0..steps {
            let b0 = -cw + (c as f64 + 0.5) * hc;
            let mut l = ln_norm(b, beta_var) + ln_norm(b0, sigma0_sq) + hb.ln() + hc.ln();
            for (xi, &yi) in x.iter().zip(y) {
                let e = xi * b + b0;
                l += ln_phi(if yi == 1 { e } else { -e });
            }
            lw.push(l);
            at.push(b);
        }
    }
    (lw, at)
}

/// ln p(y_j) for one voxel under a N(0, beta_var) coefficient prior.
pub fn voxel_log_evidence(x: &[f64], y: &[u8], beta_var: f64, sigma0_sq: f64) -> f64 {
    log_sum_exp(&voxel_grid(x, y, beta_var, sigma0_sq, 700).0)
}

/// E[β | y] and sd[β | y] for one voxel under a N(0, beta_var) prior.
pub fn voxel_posterior_moments(x: &[f64], y: &[u8], beta_var: f64, sigma0_sq: f64) -> (f64, f64) {
    let (lw, at) = voxel_grid(x, y, beta_var, sigma0_sq, 900);
    let z = log_sum_exp(&lw);
    let (mut m1, mut m2) = (0.0, 0.0);
    for (l, b) in lw.iter().zip(&at) {
        let w = (l - z).exp();
        m1 += w * b;
        m2 += w * b * b;
    }
    (m1, (m2 - m1 * m1).sqrt())
}

/// Exact posterior of (γ_1, …, γ_M) for P = 1 with θ held fixed. Voxels are
/// then independent; state index bit j is γ_j.
pub fn gamma_posterior(data: &Dataset, hp: &Hyperparams, nu0: f64, theta: &[f64]) -> Vec<f64> {
    let m = data.n_voxels();
    let x = data.x();
    let p1: Vec<f64> = (0..m)
        .map(|j| {
            let y = data.y_voxel(j);
            let l1 = voxel_log_evidence(x, y, hp.nu1, hp.sigma0_sq) - (1.0 + (-theta[j]).exp()).ln();
            let l0 = voxel_log_evidence(x, y, nu0, hp.sigma0_sq) - (1.0 + theta[j].exp()).ln();
            1.0 / (1.0 + (l0 - l1).exp())
        })
        .collect();
    (0..1usize << m)
        .map(|s| (0..m).map(|j| if s >> j & 1 == 1 { p1[j] } else { 1.0 - p1[j] }).product())
        .collect()
}

pub fn empirical_gamma(gamma: &[u8], m: usize) -> Vec<f64> {
    let draws = gamma.len() / m;
    let mut freq = vec![0.0; 1 << m];
    for d in gamma.chunks(m) {
        let s: usize = d.iter().enumerate().map(|(j, &g)| (g as usize) << j).sum();
        freq[s] += 1.0 / draws as f64;
    }
    freq
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// The tiny two-voxel, six-subject instance.
pub fn tiny_line() -> (Dataset, NeighborGraph, Hyperparams, f64, Vec<f64>) {
    let x = vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
    let y = vec![0, 0, 1, 1, 1, 1, 0, 1, 0, 1, 0, 1];
    let data = Dataset::new(6, 2, y, x, vec!["x".into()]).unwrap();
    let graph = build_graph(&LatticeMask::full(&[2, 1]).unwrap()).unwrap();
    let mut hp = Hyperparams::new(1);
    hp.sigma0_sq = 4.0;
    hp.nu1 = 4.0;
    (data, graph, hp, 0.05, vec![0.3, -0.2])
}

/// Gibbs chain on the tiny instance with θ and Ω frozen; returns the total
/// variation distance of the γ marginal from enumeration.
pub fn tiny_gamma_tv(mode: GibbsMode, iterations: usize, seed: u64) -> f64 {
    let (data, graph, hp, nu0, theta) = tiny_line();
    let mut cfg = GibbsConfig::new(iterations, iterations / 10, seed);
    cfg.mode = mode;
    cfg.freeze_theta = true;
    cfg.freeze_precision = true;
    cfg.keep_gamma = true;
    let init = ModelState {
        beta: vec![0.0; 2],
        beta0: vec![0.0; 2],
        gamma: vec![0.0; 2],
        theta: theta.clone(),
        sigma_inv: Mat::identity(1, 1),
        z: None,
    };
    let chain = run_gibbs(&data, &hp, nu0, &graph, &cfg, &init).unwrap();
    let exact = gamma_posterior(&data, &hp, nu0, &theta);
    total_variation(&empirical_gamma(chain.gamma.as_ref().unwrap(), 2), &exact)
}

/// The single-voxel instance with ν0 = ν1 (so γ is irrelevant to β).
pub fn single_voxel() -> (Dataset, NeighborGraph, Hyperparams) {
    let n = 14;
    let x: Vec<f64> = (0..n).map(|i| (i as f64 - 6.5) / 4.0).collect();
    let y: Vec<u8> = (0..n).map(|i| ((i * 5) % 7 < 3 || i > 10) as u8).collect();
    let data = Dataset::new(n, 1, y, x, vec!["x".into()]).unwrap();
    let graph = build_graph(&LatticeMask::full(&[1, 1]).unwrap()).unwrap();
    let mut hp = Hyperparams::new(1);
    hp.nu1 = 2.0;
    hp.sigma0_sq = 2.0;
    hp.nu0_sequence = vec![2.0];
    (data, graph, hp)
}

pub mod cli {
    use std::fs;
    use std::path::{Path, PathBuf};
    use std::process::{Command, Output};

    pub fn bless(args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_bless"))
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .expect("binary runs")
    }

    pub fn ok(args: &[&str]) {
        let o = bless(args);
        assert!(
            o.status.success(),
            "bless {args:?} failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }

    /// Every file under `dir`, relative path → bytes, sorted.
    pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    /// Runs every subcommand on a small simulated problem into `root`.
    pub fn run_pipeline(root: &Path, threads: usize) {
        let t = threads.to_string();
        let s = |p: &str| root.join(p).to_string_lossy().into_owned();
        let (data, blk) = (s("data"), s("block"));
        ok(&["--threads", &t, "simulate", "--out", &data, "--n", "120", "--lambda", "2", "--dims", "12x12", "--seed", "7"]);
        ok(&[
            "--threads", &t, "simulate", "--out", &blk, "--n", "150", "--dims", "14x14", "--seed", "8",
            "--layout", "block:4,4:10,10", "--set", "effect=1.5",
        ]);
        let fast = ["--set", "nu0_steps=6", "--set", "nu0_log_min=-12"];
        let with = |base: &[&str]| -> Vec<String> {
            let mut v: Vec<String> = vec!["--threads".into(), t.clone()];
            v.extend(fast.iter().map(|x| x.to_string()));
            v.extend(base.iter().map(|x| x.to_string()));
            v
        };
        let run = |base: &[&str]| {
            let v = with(base);
            let r: Vec<&str> = v.iter().map(String::as_str).collect();
            ok(&r);
        };
        run(&["fit-firth", "--data", &data, "--out", &s("firth")]);
        run(&["fit-vi", "--data", &data, "--out", &s("vi")]);
        run(&["fit-bb", "--data", &data, "--out", &s("bb"), "--b", "40"]);
        run(&["fit-gibbs", "--data", &data, "--out", &s("gibbs"), "--iterations", "150", "--burn-in", "50", "--mode", "collapsed", "--keep-draws"]);
        run(&["fit-gibbs", "--data", &data, "--out", &s("gibbs_aug"), "--iterations", "40", "--burn-in", "10"]);
        run(&["evaluate", "--data", &data, "--fit", &s("vi"), &s("bb"), &s("firth"), "--reference", &s("gibbs"), "--draws", "60", "--out", &s("eval")]);
        run(&["fit-bb", "--data", &blk, "--out", &s("block_bb"), "--b", "50"]);
        run(&["cluster", "--data", &blk, "--fit", &s("block_bb"), "--out", &s("cluster")]);
        run(&["export-plots", "--fit", &s("vi"), "--out", &s("plots"), "--voxels", "0,7,50"]);
    }
}
