//! `key = value` run configuration. Every key has a default; unknown keys are
//! rejected. The resolved snapshot lists every key and reloads to the same
//! configuration.

use std::path::Path;

use crate::bootstrap::BootstrapConfig;
use crate::cluster::ClusterOptions;
use crate::error::{BlessError, Result};
use crate::gibbs::{GibbsConfig, GibbsMode, ThetaUpdate};
use crate::linalg::Mat;
use crate::model::{log_spaced_decreasing, Hyperparams};
use crate::sim::{Layout, SimConfig};
use crate::vi::ShiftMode;

use super::{read_bytes, write_atomic};

pub const SNAPSHOT_NAME: &str = "config.resolved.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // simulation
    pub n: usize,
    pub lambda: f64,
    pub dims: [usize; 2],
    pub seed: u64,
    pub layout: Layout,
    pub effect: f64,
    // model and VI
    pub nu0_log_max: f64,
    pub nu0_log_min: f64,
    pub nu0_steps: usize,
    pub nu1: f64,
    pub sigma0_sq: f64,
    /// `None` means ν = P.
    pub wishart_df: Option<f64>,
    /// Diagonal of the Wishart scale matrix.
    pub wishart_scale: f64,
    pub epsilon: f64,
    pub max_sweeps: usize,
    pub standardize: bool,
    // bootstrap
    pub bootstrap_replicates: usize,
    pub alpha: f64,
    pub bootstrap_seed: Option<u64>,
    pub shift_mode: ShiftMode,
    pub bootstrap_epsilon: Option<f64>,
    // gibbs
    pub gibbs_iterations: usize,
    pub gibbs_burn_in: usize,
    pub gibbs_thin: usize,
    pub gibbs_seed: Option<u64>,
    pub gibbs_mode: GibbsMode,
    pub theta_update: String,
    pub theta_rw_step: f64,
    pub gibbs_keep_draws: bool,
    // inference and clusters
    pub activation_threshold: f64,
    pub fdr_level: f64,
    pub cdt: f64,
    pub ci_level: f64,
    pub two_sided: bool,
    pub prevalence_cut: f64,
    pub covariate: usize,
    // execution
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n: 1000,
            lambda: 3.0,
            dims: [50, 50],
            seed: 1,
            layout: Layout::Quadrants,
            effect: 4.0,
            nu0_log_max: -1.0,
            nu0_log_min: -20.0,
            nu0_steps: 15,
            nu1: 10.0,
            sigma0_sq: 100.0,
            wishart_df: None,
            wishart_scale: 1.0,
            epsilon: 1e-5,
            max_sweeps: 500,
            standardize: false,
            bootstrap_replicates: 1000,
            alpha: 1.0,
            bootstrap_seed: None,
            shift_mode: ShiftMode::Both,
            bootstrap_epsilon: None,
            gibbs_iterations: 15_000,
            gibbs_burn_in: 5_000,
            gibbs_thin: 1,
            gibbs_seed: None,
            gibbs_mode: GibbsMode::Augmented,
            theta_update: "polya-gamma".into(),
            theta_rw_step: 0.5,
            gibbs_keep_draws: false,
            activation_threshold: 1.96,
            fdr_level: 0.05,
            cdt: 2.3,
            ci_level: 0.95,
            two_sided: false,
            prevalence_cut: 0.5,
            covariate: 0,
            threads: 0,
        }
    }
}

fn bad(key: &str, value: &str, want: &str) -> BlessError {
    BlessError::Config(format!("{key} = '{value}': expected {want}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str, want: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, v, want))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, v, "true or false")),
    }
}

fn optional<T: std::str::FromStr>(key: &str, v: &str, want: &str) -> Result<Option<T>> {
    if v == "auto" {
        Ok(None)
    } else {
        num(key, v, want).map(Some)
    }
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or("auto".into(), |x| x.to_string())
}

fn layout_str(l: &Layout) -> String {
    match l {
        Layout::Quadrants => "quadrants".into(),
        Layout::Block { lo, hi } => format!("block:{},{}:{},{}", lo[0], lo[1], hi[0], hi[1]),
    }
}

fn parse_layout(key: &str, v: &str) -> Result<Layout> {
    if v == "quadrants" {
        return Ok(Layout::Quadrants);
    }
    let parts: Vec<&str> = v.split(':').collect();
    if parts.len() == 3 && parts[0] == "block" {
        let corner = |s: &str| -> Result<[usize; 2]> {
            let xy: Vec<&str> = s.split(',').collect();
            if xy.len() != 2 {
                return Err(bad(key, v, "quadrants or block:X0,Y0:X1,Y1"));
            }
            Ok([num(key, xy[0], "an index")?, num(key, xy[1], "an index")?])
        };
        return Ok(Layout::Block { lo: corner(parts[1])?, hi: corner(parts[2])? });
    }
    Err(bad(key, v, "quadrants or block:X0,Y0:X1,Y1"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "n" => self.n = num(key, v, "a positive integer")?,
            "lambda" => self.lambda = num(key, v, "a positive number")?,
            "dims" => {
                let parts: Vec<&str> = v.split(['x', ',']).map(str::trim).collect();
                if parts.len() != 2 {
                    return Err(bad(key, v, "WIDTHxHEIGHT"));
                }
                self.dims = [num(key, parts[0], "WIDTHxHEIGHT")?, num(key, parts[1], "WIDTHxHEIGHT")?];
            }
            "seed" => self.seed = num(key, v, "an unsigned integer")?,
            "layout" => self.layout = parse_layout(key, v)?,
            "effect" => self.effect = num(key, v, "a number")?,
            "nu0_log_max" => self.nu0_log_max = num(key, v, "a number")?,
            "nu0_log_min" => self.nu0_log_min = num(key, v, "a number")?,
            "nu0_steps" => self.nu0_steps = num(key, v, "a positive integer")?,
            "nu1" => self.nu1 = num(key, v, "a positive number")?,
            "sigma0_sq" => self.sigma0_sq = num(key, v, "a positive number")?,
            "wishart_df" => self.wishart_df = optional(key, v, "a number or auto")?,
            "wishart_scale" => self.wishart_scale = num(key, v, "a positive number")?,
            "epsilon" => self.epsilon = num(key, v, "a positive number")?,
            "max_sweeps" => self.max_sweeps = num(key, v, "a positive integer")?,
            "standardize" => self.standardize = flag(key, v)?,
            "bootstrap_replicates" => self.bootstrap_replicates = num(key, v, "a positive integer")?,
            "alpha" => self.alpha = num(key, v, "a positive number")?,
            "bootstrap_seed" => self.bootstrap_seed = optional(key, v, "an unsigned integer or auto")?,
            "shift_mode" => {
                self.shift_mode = ShiftMode::parse(v).ok_or_else(|| bad(key, v, "both or spike"))?
            }
            "bootstrap_epsilon" => self.bootstrap_epsilon = optional(key, v, "a positive number or auto")?,
            "gibbs_iterations" => self.gibbs_iterations = num(key, v, "a positive integer")?,
            "gibbs_burn_in" => self.gibbs_burn_in = num(key, v, "a non-negative integer")?,
            "gibbs_thin" => self.gibbs_thin = num(key, v, "a positive integer")?,
            "gibbs_seed" => self.gibbs_seed = optional(key, v, "an unsigned integer or auto")?,
            "gibbs_mode" => {
                self.gibbs_mode = GibbsMode::parse(v).ok_or_else(|| bad(key, v, "augmented or collapsed"))?
            }
            "theta_update" => {
                if v != "polya-gamma" && v != "random-walk" {
                    return Err(bad(key, v, "polya-gamma or random-walk"));
                }
                self.theta_update = v.to_string();
            }
            "theta_rw_step" => self.theta_rw_step = num(key, v, "a positive number")?,
            "gibbs_keep_draws" => self.gibbs_keep_draws = flag(key, v)?,
            "activation_threshold" => self.activation_threshold = num(key, v, "a positive number")?,
            "fdr_level" => self.fdr_level = num(key, v, "a number in (0, 1)")?,
            "cdt" => self.cdt = num(key, v, "a number")?,
            "ci_level" => self.ci_level = num(key, v, "a number in (0, 1)")?,
            "two_sided" => self.two_sided = flag(key, v)?,
            "prevalence_cut" => self.prevalence_cut = num(key, v, "a number in [0, 1)")?,
            "covariate" => self.covariate = num(key, v, "a covariate index")?,
            "threads" => self.threads = num(key, v, "a non-negative integer (0 = all cores)")?,
            _ => return Err(BlessError::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n", self.n.to_string()),
            ("lambda", self.lambda.to_string()),
            ("dims", format!("{}x{}", self.dims[0], self.dims[1])),
            ("seed", self.seed.to_string()),
            ("layout", layout_str(&self.layout)),
            ("effect", self.effect.to_string()),
            ("nu0_log_max", self.nu0_log_max.to_string()),
            ("nu0_log_min", self.nu0_log_min.to_string()),
            ("nu0_steps", self.nu0_steps.to_string()),
            ("nu1", self.nu1.to_string()),
            ("sigma0_sq", self.sigma0_sq.to_string()),
            ("wishart_df", show_opt(&self.wishart_df)),
            ("wishart_scale", self.wishart_scale.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("max_sweeps", self.max_sweeps.to_string()),
            ("standardize", self.standardize.to_string()),
            ("bootstrap_replicates", self.bootstrap_replicates.to_string()),
            ("alpha", self.alpha.to_string()),
            ("bootstrap_seed", self.bootstrap_seed().to_string()),
            ("shift_mode", self.shift_mode.as_str().to_string()),
            ("bootstrap_epsilon", show_opt(&self.bootstrap_epsilon)),
            ("gibbs_iterations", self.gibbs_iterations.to_string()),
            ("gibbs_burn_in", self.gibbs_burn_in.to_string()),
            ("gibbs_thin", self.gibbs_thin.to_string()),
            ("gibbs_seed", self.gibbs_seed().to_string()),
            ("gibbs_mode", self.gibbs_mode.as_str().to_string()),
            ("theta_update", self.theta_update.clone()),
            ("theta_rw_step", self.theta_rw_step.to_string()),
            ("gibbs_keep_draws", self.gibbs_keep_draws.to_string()),
            ("activation_threshold", self.activation_threshold.to_string()),
            ("fdr_level", self.fdr_level.to_string()),
            ("cdt", self.cdt.to_string()),
            ("ci_level", self.ci_level.to_string()),
            ("two_sided", self.two_sided.to_string()),
            ("prevalence_cut", self.prevalence_cut.to_string()),
            ("covariate", self.covariate.to_string()),
            ("threads", self.threads.to_string()),
        ]
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                BlessError::Config(format!("line {}: expected key = value, found '{line}'", i + 1))
            })?;
            self.set(k.trim(), v)
                .map_err(|e| BlessError::Config(format!("line {}: {}", i + 1, strip_prefix(e))))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| BlessError::Config(format!("{} is not UTF-8", path.display())))?;
        Self::parse_str(&text).map_err(|e| BlessError::Config(format!("{}: {}", path.display(), strip_prefix(e))))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# resolved run configuration\n");
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(SNAPSHOT_NAME), self.to_text().as_bytes())
    }

    pub fn bootstrap_seed(&self) -> u64 {
        self.bootstrap_seed.unwrap_or(self.seed)
    }

    pub fn gibbs_seed(&self) -> u64 {
        self.gibbs_seed.unwrap_or(self.seed)
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let cfg = SimConfig {
            n: self.n,
            lambda: self.lambda,
            dims: self.dims,
            seed: self.seed,
            layout: self.layout.clone(),
            effect: self.effect,
        };
        cfg.validate().map_err(|e| BlessError::Config(strip_prefix(e)))?;
        Ok(cfg)
    }

    pub fn hyperparams(&self, p: usize) -> Result<Hyperparams> {
        if self.nu0_steps == 0 || !(self.nu0_log_max > self.nu0_log_min) && self.nu0_steps > 1 {
            return Err(BlessError::Config(
                "nu0_log_max must exceed nu0_log_min and nu0_steps must be positive".into(),
            ));
        }
        if !(self.wishart_scale > 0.0) {
            return Err(BlessError::Config("wishart_scale must be positive".into()));
        }
        let hp = Hyperparams {
            nu0_sequence: log_spaced_decreasing(self.nu0_log_max, self.nu0_log_min, self.nu0_steps),
            nu1: self.nu1,
            sigma0_sq: self.sigma0_sq,
            wishart_df: self.wishart_df.unwrap_or(p as f64),
            wishart_scale_inv: Mat::identity(p, p) / self.wishart_scale,
            epsilon: self.epsilon,
            max_sweeps: self.max_sweeps,
        };
        hp.validate().map_err(|e| BlessError::Config(strip_prefix(e)))?;
        Ok(hp)
    }

    pub fn bootstrap_config(&self, nu0_target: f64) -> Result<BootstrapConfig> {
        let cfg = BootstrapConfig {
            b: self.bootstrap_replicates,
            alpha: self.alpha,
            base_seed: self.bootstrap_seed(),
            nu0_target,
            shift_mode: self.shift_mode,
            epsilon: self.bootstrap_epsilon,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn gibbs_config(&self) -> Result<GibbsConfig> {
        let cfg = GibbsConfig {
            iterations: self.gibbs_iterations,
            burn_in: self.gibbs_burn_in,
            thin: self.gibbs_thin,
            seed: self.gibbs_seed(),
            mode: self.gibbs_mode,
            theta_update: if self.theta_update == "random-walk" {
                ThetaUpdate::RandomWalk { step: self.theta_rw_step }
            } else {
                ThetaUpdate::PolyaGamma
            },
            freeze_theta: false,
            freeze_precision: false,
            keep_gamma: false,
            keep_theta: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn cluster_options(&self) -> Result<ClusterOptions> {
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(BlessError::Config(format!("ci_level must be in (0, 1), got {}", self.ci_level)));
        }
        if !(0.0..1.0).contains(&self.prevalence_cut) {
            return Err(BlessError::Config(format!(
                "prevalence_cut must be in [0, 1), got {}",
                self.prevalence_cut
            )));
        }
        Ok(ClusterOptions {
            cdt: self.cdt,
            level: self.ci_level,
            two_sided: self.two_sided,
            prevalence_cut: self.prevalence_cut,
        })
    }
}

fn strip_prefix(e: BlessError) -> String {
    match e {
        BlessError::Config(m) => m,
        other => other.to_string(),
    }
}
