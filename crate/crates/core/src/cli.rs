//! Command-line driver. Every subcommand reads a dataset directory or fit
//! directory, writes its outputs atomically into `--out`, and leaves a
//! resolved configuration snapshot next to them.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use rand_distr::{Distribution, Normal};

use crate::bootstrap::{run_bootstrap, PosteriorEnsemble};
use crate::cluster::{cluster_size_inference, cluster_size_mapping};
use crate::dpe::{export_regularization_path, run_dpe, DpePath};
use crate::error::{BlessError, Result};
use crate::firth::{bh_fdr_adjust, fit_all_voxels};
use crate::gibbs::{chain_summary, init_from_variational, run_gibbs};
use crate::io::dataset::read_mask;
use crate::io::nifti::read_nifti;
use crate::io::tables::{column, fmt, fmt_opt, parse_f64, read_table, write_table};
use crate::io::{
    read_dataset, read_ensemble, write_dataset, write_ensemble, write_volume, DatasetDir, EnsembleFile, RunConfig,
    TruthMaps, Volume, VolumeData,
};
use crate::lattice::{build_graph, LatticeMask};
use crate::metrics::{bias_var_mse, confusion_rates, median, posterior_distance};
use crate::rng::{self, TAG_VI_DRAWS};
use crate::sim::generate_dataset;
use crate::vi::default_init;

pub const SUMMARY: &str = "summary.csv";
pub const SUMMARY_HEADER: [&str; 6] = ["voxel", "covariate", "estimate", "sd", "statistic", "active"];

#[derive(Parser, Debug)]
#[command(name = "bless", version, about = "Spatial spike-and-slab probit models for binary lesion maps")]
pub struct Cli {
    /// key = value configuration file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Extra configuration entries, e.g. `--set nu1=5` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Worker threads (0 = all cores). Does not change any output.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with ground truth.
    Simulate(SimulateArgs),
    /// Voxelwise Firth probit fits with Benjamini-Hochberg correction.
    FitFirth(FitArgs),
    /// Variational fit along the spike-variance path.
    FitVi(FitArgs),
    /// Bayesian-bootstrap ensemble of variational fits.
    FitBb(FitBbArgs),
    /// Gibbs sampler warm-started from the variational fit.
    FitGibbs(FitGibbsArgs),
    /// Detection rates, bias/variance/MSE and posterior distances.
    Evaluate(EvaluateArgs),
    /// Cluster-size inference and mapping from a bootstrap ensemble.
    Cluster(ClusterArgs),
    /// Regularization-path and log-marginal tables from a variational fit.
    ExportPlots(ExportArgs),
    /// Stack NIfTI-1 images (.nii or .nii.gz) into one BLSV volume file.
    ConvertNifti(ConvertArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// WIDTHxHEIGHT
    #[arg(long)]
    pub dims: Option<String>,
    /// `quadrants` or `block:X0,Y0:X1,Y1`
    #[arg(long)]
    pub layout: Option<String>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FitBbArgs {
    #[command(flatten)]
    pub io: FitArgs,
    /// Number of bootstrap replicates.
    #[arg(long)]
    pub b: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct FitGibbsArgs {
    #[command(flatten)]
    pub io: FitArgs,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `augmented` or `collapsed`
    #[arg(long)]
    pub mode: Option<String>,
    /// Also write every retained draw to draws.blsb.
    #[arg(long)]
    pub keep_draws: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Dataset directory holding the truth maps.
    #[arg(long)]
    pub data: PathBuf,
    /// Fit directories; several fits of one method on replicate datasets
    /// also give bias/variance/MSE.
    #[arg(long, required = true, num_args = 1..)]
    pub fit: Vec<PathBuf>,
    /// Fit directory whose samples serve as the reference posterior.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Gaussian draws per coefficient for fits without stored samples.
    #[arg(long, default_value_t = 1000)]
    pub draws: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ClusterArgs {
    /// Dataset directory (for the mask).
    #[arg(long)]
    pub data: PathBuf,
    /// Bootstrap fit directory.
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub cdt: Option<f64>,
    #[arg(long)]
    pub covariate: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Variational fit directory.
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Restrict the path table to these in-mask voxel indices.
    #[arg(long, value_delimiter = ',')]
    pub voxels: Vec<usize>,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Store as u8 with values above 0.5 mapped to 1, the rest to 0.
    #[arg(long)]
    pub binarize: bool,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                3
            } else {
                2
            }
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| BlessError::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(cfg)
}

fn set_opt<T: ToString>(cfg: &mut RunConfig, key: &str, v: &Option<T>) -> Result<()> {
    match v {
        Some(v) => cfg.set(key, &v.to_string()),
        None => Ok(()),
    }
}

fn init_pool(threads: usize) {
    // A second initialisation (tests running several commands) is harmless.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::Simulate(a) => {
            set_opt(&mut cfg, "n", &a.n)?;
            set_opt(&mut cfg, "lambda", &a.lambda)?;
            set_opt(&mut cfg, "seed", &a.seed)?;
            set_opt(&mut cfg, "dims", &a.dims)?;
            set_opt(&mut cfg, "layout", &a.layout)?;
        }
        Command::FitBb(a) => {
            set_opt(&mut cfg, "bootstrap_replicates", &a.b)?;
            set_opt(&mut cfg, "alpha", &a.alpha)?;
            set_opt(&mut cfg, "bootstrap_seed", &a.seed)?;
        }
        Command::FitGibbs(a) => {
            set_opt(&mut cfg, "gibbs_iterations", &a.iterations)?;
            set_opt(&mut cfg, "gibbs_burn_in", &a.burn_in)?;
            set_opt(&mut cfg, "gibbs_seed", &a.seed)?;
            set_opt(&mut cfg, "gibbs_mode", &a.mode)?;
            if a.keep_draws {
                cfg.gibbs_keep_draws = true;
            }
        }
        Command::Cluster(a) => {
            set_opt(&mut cfg, "cdt", &a.cdt)?;
            set_opt(&mut cfg, "covariate", &a.covariate)?;
        }
        _ => {}
    }
    init_pool(cli.threads.unwrap_or(cfg.threads));
    match cli.command {
        Command::Simulate(a) => simulate(&cfg, &a.out),
        Command::FitFirth(a) => fit_firth(&cfg, &a),
        Command::FitVi(a) => fit_vi(&cfg, &a),
        Command::FitBb(a) => fit_bb(&cfg, &a.io),
        Command::FitGibbs(a) => fit_gibbs(&cfg, &a.io),
        Command::Evaluate(a) => evaluate(&cfg, &a),
        Command::Cluster(a) => cluster(&cfg, &a),
        Command::ExportPlots(a) => export_plots(&cfg, &a),
        Command::ConvertNifti(a) => convert_nifti(&a),
    }
}

fn prepare_out(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| BlessError::io(dir, e))?;
    cfg.write_snapshot(dir)
}

fn simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let sim = generate_dataset(&cfg.sim_config()?)?;
    prepare_out(out, cfg)?;
    write_dataset(out, &sim.mask, &sim.data, Some(&TruthMaps::from(&sim.truth)))?;
    info!(
        "simulated N = {}, M = {} into {}",
        sim.data.n_subjects(),
        sim.data.n_voxels(),
        out.display()
    );
    Ok(())
}

fn load_data(cfg: &RunConfig, dir: &Path) -> Result<DatasetDir> {
    let mut d = read_dataset(dir)?;
    if cfg.standardize {
        d.data.standardize();
    }
    if !d.data.check_rank() {
        return Err(BlessError::Invalid(format!(
            "design matrix in {} is rank deficient",
            dir.display()
        )));
    }
    Ok(d)
}

pub struct SummaryRow {
    pub estimate: f64,
    pub sd: f64,
    pub statistic: f64,
    pub active: bool,
}

/// Writes the common per-coefficient table, plus estimate/sd/statistic/active volumes.
fn write_summary(out: &Path, mask: &LatticeMask, p: usize, rows: &[SummaryRow]) -> Result<()> {
    let table: Vec<Vec<String>> = rows
        .iter()
        .enumerate()
        .map(|(c, r)| {
            vec![
                (c / p).to_string(),
                (c % p).to_string(),
                fmt(r.estimate),
                fmt(r.sd),
                fmt(r.statistic),
                (r.active as u8).to_string(),
            ]
        })
        .collect();
    write_table(&out.join(SUMMARY), &SUMMARY_HEADER, &table)?;
    let maps = |f: &dyn Fn(&SummaryRow) -> f64| -> Vec<Vec<f64>> {
        (0..p)
            .map(|k| rows.iter().skip(k).step_by(p).map(f).collect())
            .collect()
    };
    write_volume(&out.join("estimate.blsv"), &Volume::from_maps(mask, &maps(&|r| r.estimate))?)?;
    write_volume(&out.join("sd.blsv"), &Volume::from_maps(mask, &maps(&|r| r.sd))?)?;
    write_volume(&out.join("statistic.blsv"), &Volume::from_maps(mask, &maps(&|r| r.statistic))?)?;
    let active: Vec<Vec<bool>> = (0..p)
        .map(|k| rows.iter().skip(k).step_by(p).map(|r| r.active).collect())
        .collect();
    write_volume(&out.join("active.blsv"), &Volume::from_binary_maps(mask, &active)?)
}

pub struct Summary {
    pub p: usize,
    pub estimate: Vec<f64>,
    pub sd: Vec<f64>,
    pub active: Vec<bool>,
}

pub fn read_summary(dir: &Path) -> Result<Summary> {
    let path = dir.join(SUMMARY);
    let (header, rows) = read_table(&path)?;
    let [cv, ck, ce, cs, ca] = ["voxel", "covariate", "estimate", "sd", "active"].map(|n| column(&header, n, &path));
    let (cv, ck, ce, cs, ca) = (cv?, ck?, ce?, cs?, ca?);
    let p = rows
        .iter()
        .map(|r| r[ck].parse::<usize>().map(|k| k + 1).unwrap_or(0))
        .max()
        .unwrap_or(0);
    if p == 0 || rows.len() % p != 0 {
        return Err(BlessError::format(&path, "rows do not form a voxel × covariate grid"));
    }
    let mut s = Summary {
        p,
        estimate: Vec::with_capacity(rows.len()),
        sd: Vec::with_capacity(rows.len()),
        active: Vec::with_capacity(rows.len()),
    };
    for (c, r) in rows.iter().enumerate() {
        if r[cv] != (c / p).to_string() || r[ck] != (c % p).to_string() {
            return Err(BlessError::format(&path, format!("row {} out of voxel/covariate order", c + 1)));
        }
        s.estimate.push(parse_f64(&r[ce], &path)?);
        s.sd.push(parse_f64(&r[cs], &path)?);
        s.active.push(r[ca] == "1");
    }
    Ok(s)
}

fn fit_firth(cfg: &RunConfig, a: &FitArgs) -> Result<()> {
    let d = load_data(cfg, &a.data)?;
    let p = d.data.n_covariates();
    let fit = fit_all_voxels(&d.data);
    prepare_out(&a.out, cfg)?;
    let mut rows = Vec::with_capacity(fit.n_voxels() * p);
    let mut bh_rows = Vec::new();
    let mut adjusted = vec![0.0; fit.n_voxels() * p];
    for k in 0..p {
        let bh = bh_fdr_adjust(&fit.pvalue_map(k), cfg.fdr_level);
        for j in 0..fit.n_voxels() {
            adjusted[j * p + k] = bh.adjusted[j];
        }
    }
    for j in 0..fit.n_voxels() {
        let v = &fit.voxels[j];
        for k in 0..p {
            let q = adjusted[j * p + k];
            rows.push(SummaryRow {
                estimate: fit.beta(j, k),
                sd: v.se[k + 1],
                statistic: fit.tstat(j, k),
                active: q <= cfg.fdr_level,
            });
            bh_rows.push(vec![
                j.to_string(),
                k.to_string(),
                fmt(fit.pvalue(j, k)),
                fmt(q),
                ((q <= cfg.fdr_level) as u8).to_string(),
                (v.converged as u8).to_string(),
                (v.degenerate as u8).to_string(),
            ]);
        }
    }
    write_summary(&a.out, &d.mask, p, &rows)?;
    write_table(
        &a.out.join("bh.csv"),
        &["voxel", "covariate", "pvalue", "adjusted", "rejected", "converged", "degenerate"],
        &bh_rows,
    )
}

fn dpe_path(cfg: &RunConfig, d: &DatasetDir) -> Result<(DpePath, crate::lattice::NeighborGraph)> {
    let p = d.data.n_covariates();
    let hp = cfg.hyperparams(p)?;
    let graph = build_graph(&d.mask)?;
    let firth = fit_all_voxels(&d.data);
    let init = default_init(&d.data, &hp, &firth, &graph);
    Ok((run_dpe(&d.data, &hp, &graph, init)?, graph))
}

fn fit_vi(cfg: &RunConfig, a: &FitArgs) -> Result<()> {
    let d = load_data(cfg, &a.data)?;
    let p = d.data.n_covariates();
    let (path, _) = dpe_path(cfg, &d)?;
    prepare_out(&a.out, cfg)?;
    let vs = path.final_state();
    let rows: Vec<SummaryRow> = (0..vs.m * p)
        .map(|c| {
            let sd = vs.beta_sd(c / p, c % p);
            SummaryRow {
                estimate: vs.m_beta[c],
                sd,
                statistic: vs.m_beta[c] / sd,
                active: vs.q_gamma[c] > 0.5,
            }
        })
        .collect();
    write_summary(&a.out, &d.mask, p, &rows)?;
    let incl: Vec<Vec<f64>> = (0..p).map(|k| vs.gamma_map(k)).collect();
    write_volume(&a.out.join("inclusion.blsv"), &Volume::from_maps(&d.mask, &incl)?)?;
    let steps: Vec<Vec<String>> = path
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut row = vec![
                i.to_string(),
                fmt(s.nu0),
                fmt(s.nu0.ln()),
                s.state.sweeps().to_string(),
                s.state.status.as_str().to_string(),
                fmt_opt(s.state.final_elbo()),
                fmt(s.log_marginal),
            ];
            row.extend((0..p).map(|k| s.active.iter().skip(k).step_by(p).filter(|&&x| x).count().to_string()));
            row
        })
        .collect();
    let mut header = vec!["step", "nu0", "log_nu0", "sweeps", "status", "elbo", "log_marginal"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    header.extend((0..p).map(|k| format!("n_active_{k}")));
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    write_table(&a.out.join("dpe_steps.csv"), &h, &steps)?;
    let path_rows: Vec<Vec<String>> = export_regularization_path(&path)
        .into_iter()
        .map(|r| {
            vec![
                fmt(r.nu0),
                r.voxel.to_string(),
                r.covariate.to_string(),
                fmt(r.mean),
                (r.active as u8).to_string(),
            ]
        })
        .collect();
    write_table(&a.out.join("path.csv"), &["nu0", "voxel", "covariate", "mean", "active"], &path_rows)?;
    let trace: Vec<Vec<String>> = path
        .steps
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.state
                .elbo_trace
                .iter()
                .enumerate()
                .map(move |(t, e)| vec![i.to_string(), t.to_string(), fmt(*e)])
        })
        .collect();
    write_table(&a.out.join("elbo_trace.csv"), &["step", "sweep", "elbo"], &trace)
}

fn fit_bb(cfg: &RunConfig, a: &FitArgs) -> Result<()> {
    let d = load_data(cfg, &a.data)?;
    let p = d.data.n_covariates();
    let (path, graph) = dpe_path(cfg, &d)?;
    let hp = cfg.hyperparams(p)?;
    let bcfg = cfg.bootstrap_config(path.final_step().nu0)?;
    let ens = run_bootstrap(&d.data, &hp, &graph, &bcfg, path.final_state())?;
    prepare_out(&a.out, cfg)?;
    write_ensemble(
        &a.out.join("ensemble.blsb"),
        &EnsembleFile {
            b: ens.n_replicates(),
            m: ens.m,
            p: ens.p,
            values: ens.samples.clone(),
        },
    )?;
    let rows: Vec<SummaryRow> = (0..ens.m * p)
        .map(|c| SummaryRow {
            estimate: ens.mean[c],
            sd: ens.sd[c],
            statistic: ens.tstat[c],
            active: ens.tstat[c].abs() > cfg.activation_threshold,
        })
        .collect();
    write_summary(&a.out, &d.mask, p, &rows)?;
    let reps: Vec<Vec<String>> = (0..bcfg.b)
        .map(|b| vec![b.to_string(), (!ens.failed.contains(&b) as u8).to_string()])
        .collect();
    write_table(&a.out.join("replicates.csv"), &["replicate", "ok"], &reps)
}

fn fit_gibbs(cfg: &RunConfig, a: &FitArgs) -> Result<()> {
    let d = load_data(cfg, &a.data)?;
    let p = d.data.n_covariates();
    let (path, graph) = dpe_path(cfg, &d)?;
    let hp = cfg.hyperparams(p)?;
    let mut gcfg = cfg.gibbs_config()?;
    gcfg.keep_gamma = true;
    let init = init_from_variational(path.final_state());
    let chain = run_gibbs(&d.data, &hp, path.final_step().nu0, &graph, &gcfg, &init)?;
    let summ = chain_summary(&chain)?;
    let mp = chain.m * p;
    let gamma = chain.gamma.as_ref().expect("gamma kept");
    let mut pip = vec![0.0; mp];
    for draw in gamma.chunks(mp) {
        for (a, &g) in pip.iter_mut().zip(draw) {
            *a += g as f64;
        }
    }
    pip.iter_mut().for_each(|v| *v /= chain.retained as f64);
    prepare_out(&a.out, cfg)?;
    let rows: Vec<SummaryRow> = (0..mp)
        .map(|c| SummaryRow {
            estimate: summ.mean[c],
            sd: summ.sd[c],
            statistic: summ.tstat[c],
            active: pip[c] > 0.5,
        })
        .collect();
    write_summary(&a.out, &d.mask, p, &rows)?;
    let incl: Vec<Vec<f64>> = (0..p).map(|k| PosteriorEnsemble::column(&pip, p, k)).collect();
    write_volume(&a.out.join("inclusion.blsv"), &Volume::from_maps(&d.mask, &incl)?)?;
    let diag: Vec<Vec<String>> = (0..mp)
        .map(|c| vec![(c / p).to_string(), (c % p).to_string(), fmt(summ.ess[c]), fmt(pip[c])])
        .collect();
    write_table(&a.out.join("chain.csv"), &["voxel", "covariate", "ess", "inclusion"], &diag)?;
    write_table(
        &a.out.join("sampler.csv"),
        &["retained", "acceptance"],
        &[vec![chain.retained.to_string(), fmt_opt(chain.acceptance)]],
    )?;
    if cfg.gibbs_keep_draws {
        write_ensemble(
            &a.out.join("draws.blsb"),
            &EnsembleFile {
                b: chain.retained,
                m: chain.m,
                p,
                values: chain.beta,
            },
        )?;
    }
    Ok(())
}

/// Posterior samples of a fit: the stored ensemble or chain, else Gaussian
/// draws from the summary means and sds.
fn fit_samples(dir: &Path, s: &Summary, draws: usize, seed: u64) -> Result<EnsembleFile> {
    for name in ["ensemble.blsb", "draws.blsb"] {
        let path = dir.join(name);
        if path.exists() {
            return read_ensemble(&path);
        }
    }
    let mp = s.estimate.len();
    let mut values = vec![0.0; draws * mp];
    for c in 0..mp {
        let mut r = rng::stream(seed, TAG_VI_DRAWS, 0, c as u64);
        let sd = if s.sd[c].is_finite() && s.sd[c] >= 0.0 { s.sd[c] } else { 0.0 };
        let nd = Normal::new(s.estimate[c], sd)
            .map_err(|e| BlessError::Invalid(format!("{}: coefficient {c}: {e}", dir.display())))?;
        for t in 0..draws {
            values[t * mp + c] = nd.sample(&mut r);
        }
    }
    Ok(EnsembleFile {
        b: draws,
        m: mp / s.p,
        p: s.p,
        values,
    })
}

fn label(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn evaluate(cfg: &RunConfig, a: &EvaluateArgs) -> Result<()> {
    let mask = read_mask(&a.data)?;
    let truth = read_dataset(&a.data)?
        .truth
        .ok_or_else(|| BlessError::Invalid(format!("{} has no truth maps", a.data.display())))?;
    let m = mask.n_voxels();
    let p = truth.active.len();
    let summaries: Vec<Summary> = a.fit.iter().map(|f| read_summary(f)).collect::<Result<_>>()?;
    for (s, f) in summaries.iter().zip(&a.fit) {
        if s.p != p || s.estimate.len() != m * p {
            return Err(BlessError::Dimension(format!(
                "{} has {} coefficients, the dataset {m} × {p}",
                f.display(),
                s.estimate.len()
            )));
        }
    }
    prepare_out(&a.out, cfg)?;

    let mut rates = Vec::new();
    for (s, f) in summaries.iter().zip(&a.fit) {
        for k in 0..p {
            let est: Vec<bool> = s.active.iter().skip(k).step_by(p).copied().collect();
            let r = confusion_rates(&est, &truth.active[k])?;
            let frac = |x: Option<f64>| fmt_opt(x);
            rates.push(vec![
                label(f),
                k.to_string(),
                r.tp.to_string(),
                r.fp.to_string(),
                r.tn.to_string(),
                r.fn_.to_string(),
                frac(r.tpr),
                frac(r.tdr),
                frac(r.fpr),
                frac(r.fdr),
            ]);
        }
    }
    write_table(
        &a.out.join("rates.csv"),
        &["fit", "covariate", "tp", "fp", "tn", "fn", "tpr", "tdr", "fpr", "fdr"],
        &rates,
    )?;

    if summaries.len() >= 2 {
        let mut agg_rows = Vec::new();
        let mut voxel_rows = Vec::new();
        for k in 0..p {
            let ests: Vec<Vec<f64>> = summaries
                .iter()
                .map(|s| s.estimate.iter().skip(k).step_by(p).copied().collect())
                .collect();
            let bvm = bias_var_mse(&ests, &truth.coef_map(k))?;
            let inactive: Vec<bool> = truth.active[k].iter().map(|a| !a).collect();
            for (set, sel) in [("all", None), ("active", Some(&truth.active[k][..])), ("inactive", Some(&inactive[..]))] {
                let g = bvm.aggregate(sel);
                agg_rows.push(vec![
                    k.to_string(),
                    set.to_string(),
                    g.n_voxels.to_string(),
                    fmt(g.bias),
                    fmt(g.variance),
                    fmt(g.mse),
                ]);
            }
            for j in 0..m {
                voxel_rows.push(vec![
                    j.to_string(),
                    k.to_string(),
                    fmt(bvm.bias[j]),
                    fmt(bvm.variance[j]),
                    fmt(bvm.mse[j]),
                ]);
            }
        }
        write_table(
            &a.out.join("bias_variance_mse.csv"),
            &["covariate", "voxels", "n_voxels", "bias", "variance", "mse"],
            &agg_rows,
        )?;
        write_table(
            &a.out.join("bias_variance_mse_voxel.csv"),
            &["voxel", "covariate", "bias", "variance", "mse"],
            &voxel_rows,
        )?;
    }

    if let Some(refdir) = &a.reference {
        let rs = read_summary(refdir)?;
        let reference = fit_samples(refdir, &rs, a.draws, cfg.seed)?;
        let mut dist_rows = Vec::new();
        let mut medians = Vec::new();
        for (s, f) in summaries.iter().zip(&a.fit) {
            let samples = fit_samples(f, s, a.draws, cfg.seed)?;
            if samples.m != m || samples.p != p || reference.m != m || reference.p != p {
                return Err(BlessError::Dimension(format!("samples of {} do not match the dataset", f.display())));
            }
            for k in 0..p {
                let mut kls = Vec::with_capacity(m);
                let mut w1s = Vec::with_capacity(m);
                for j in 0..m {
                    let col = |e: &EnsembleFile| -> Vec<f64> {
                        (0..e.b).map(|b| e.values[b * m * p + j * p + k]).collect()
                    };
                    let d = posterior_distance(&col(&samples), &col(&reference))?;
                    kls.push(d.kl.unwrap_or(f64::NAN));
                    w1s.push(d.w1);
                    dist_rows.push(vec![label(f), j.to_string(), k.to_string(), fmt_opt(d.kl), fmt(d.w1)]);
                }
                medians.push(vec![label(f), k.to_string(), fmt(median(&kls)), fmt(median(&w1s))]);
            }
        }
        write_table(&a.out.join("distances.csv"), &["fit", "voxel", "covariate", "kl", "w1"], &dist_rows)?;
        write_table(
            &a.out.join("distance_medians.csv"),
            &["fit", "covariate", "median_kl", "median_w1"],
            &medians,
        )?;
    }
    Ok(())
}

fn cluster(cfg: &RunConfig, a: &ClusterArgs) -> Result<()> {
    let mask = read_mask(&a.data)?;
    let graph = build_graph(&mask)?;
    let path = a.fit.join("ensemble.blsb");
    let e = read_ensemble(&path)?;
    if e.m != mask.n_voxels() {
        return Err(BlessError::Dimension(format!(
            "{} has M = {}, the mask {}",
            path.display(),
            e.m,
            mask.n_voxels()
        )));
    }
    let ens = PosteriorEnsemble::from_samples(e.m, e.p, (0..e.b).collect(), e.values)?;
    let opts = cfg.cluster_options()?;
    let k = cfg.covariate;
    let report = cluster_size_inference(&ens, k, &graph, &opts)?;
    let maps = cluster_size_mapping(&ens, k, &graph, &opts)?;
    prepare_out(&a.out, cfg)?;
    let rows: Vec<Vec<String>> = report
        .clusters
        .iter()
        .map(|c| {
            vec![
                c.id.to_string(),
                c.observed_size.to_string(),
                fmt(c.ci_lower),
                fmt(c.ci_upper),
                fmt(c.mean),
                fmt(c.sd),
            ]
        })
        .collect();
    write_table(
        &a.out.join("clusters.csv"),
        &["cluster", "observed_size", "ci_lower", "ci_upper", "mean", "sd"],
        &rows,
    )?;
    let dist: Vec<Vec<String>> = report
        .clusters
        .iter()
        .flat_map(|c| {
            c.distribution
                .iter()
                .enumerate()
                .map(move |(b, s)| vec![c.id.to_string(), b.to_string(), s.to_string()])
        })
        .collect();
    write_table(&a.out.join("cluster_sizes.csv"), &["cluster", "replicate", "size"], &dist)?;
    let members: Vec<Vec<String>> = report
        .clusters
        .iter()
        .flat_map(|c| c.members.iter().map(move |j| vec![c.id.to_string(), j.to_string()]))
        .collect();
    write_table(&a.out.join("cluster_members.csv"), &["cluster", "voxel"], &members)?;
    write_volume(
        &a.out.join("prevalence.blsv"),
        &Volume::from_maps(&mask, std::slice::from_ref(&maps.prevalence))?,
    )?;
    write_volume(
        &a.out.join("size_mean.blsv"),
        &Volume::from_maps(&mask, std::slice::from_ref(&maps.size_mean))?,
    )?;
    write_volume(&a.out.join("size_sd.blsv"), &Volume::from_maps(&mask, std::slice::from_ref(&maps.size_sd))?)
}

fn export_plots(cfg: &RunConfig, a: &ExportArgs) -> Result<()> {
    let ppath = a.fit.join("path.csv");
    let (header, rows) = read_table(&ppath)?;
    let [cn, cv, ck, cm, ca] = ["nu0", "voxel", "covariate", "mean", "active"].map(|n| column(&header, n, &ppath));
    let (cn, cv, ck, cm, ca) = (cn?, cv?, ck?, cm?, ca?);
    let keep = |v: &str| -> bool { a.voxels.is_empty() || v.parse().map(|j: usize| a.voxels.contains(&j)).unwrap_or(false) };
    let mut out_rows = Vec::new();
    for r in &rows {
        if keep(&r[cv]) {
            let nu0 = parse_f64(&r[cn], &ppath)?;
            out_rows.push(vec![fmt(nu0.ln()), r[cv].clone(), r[ck].clone(), r[cm].clone(), r[ca].clone()]);
        }
    }
    prepare_out(&a.out, cfg)?;
    write_table(
        &a.out.join("regularization_path.csv"),
        &["log_nu0", "voxel", "covariate", "mean", "active"],
        &out_rows,
    )?;
    let spath = a.fit.join("dpe_steps.csv");
    let (sh, srows) = read_table(&spath)?;
    let [sl, sm] = ["log_nu0", "log_marginal"].map(|n| column(&sh, n, &spath));
    let (sl, sm) = (sl?, sm?);
    let act: Vec<usize> = (0..sh.len()).filter(|&i| sh[i].starts_with("n_active_")).collect();
    let mut th = vec!["log_nu0".to_string(), "log_marginal".to_string()];
    th.extend(act.iter().map(|&i| sh[i].clone()));
    let trace: Vec<Vec<String>> = srows
        .iter()
        .map(|r| {
            let mut row = vec![r[sl].clone(), r[sm].clone()];
            row.extend(act.iter().map(|&i| r[i].clone()));
            row
        })
        .collect();
    let h: Vec<&str> = th.iter().map(String::as_str).collect();
    write_table(&a.out.join("marginal_trace.csv"), &h, &trace)
}

fn convert_nifti(a: &ConvertArgs) -> Result<()> {
    let mut dims: Option<Vec<usize>> = None;
    let mut count = 0;
    let mut u8s = Vec::new();
    let mut f64s = Vec::new();
    for path in &a.input {
        let v = read_nifti(path, a.binarize)?;
        match &dims {
            None => dims = Some(v.dims.clone()),
            Some(d) if *d != v.dims => {
                return Err(BlessError::Dimension(format!(
                    "{} has dims {:?}, expected {:?}",
                    path.display(),
                    v.dims,
                    d
                )))
            }
            _ => {}
        }
        count += v.count;
        match v.data {
            VolumeData::U8(b) => u8s.extend(b),
            VolumeData::F64(x) => f64s.extend(x),
        }
    }
    let dims = dims.expect("at least one input");
    let vol = if a.binarize {
        Volume::new_u8(&dims, count, u8s)?
    } else {
        Volume::new_f64(&dims, count, f64s)?
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| BlessError::io(parent, e))?;
    }
    write_volume(&a.out, &vol)
}
