//! Experiment configuration: defaults, TOML config files and command-line
//! overrides, with validation of every range before a run starts.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::buffer::LogBase;
use crate::data::ScheduleConfig;
use crate::error::{FedError, Result};
use crate::federation::MethodVariant;
use crate::model::OptimizerKind;
use crate::replay::{GradAveraging, LambdaMode, TrainConfig};

/// Environment variable naming the default output directory.
pub const OUTPUT_ENV: &str = "FEDKACE_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartMode {
    Warm,
    Cold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationWeighting {
    /// Unweighted mean for the proposed method, sample-count weights for FedAvg.
    Auto,
    Uniform,
    SampleCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub method: MethodVariant,
    pub clients: usize,
    pub rounds: usize,
    pub c_max: usize,
    pub window: usize,
    pub overlap: usize,
    /// Buffer capacity per client.
    pub capacity: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub n_per_cat: usize,
    pub n_test_per_cat: usize,
    pub noise_sigma: f64,
    pub separation: f64,
    pub seed: u64,
    pub output: PathBuf,
    /// Worker threads for client-parallel steps; 0 picks the machine default.
    pub workers: usize,
    pub log_base: f64,
    pub lambda_max: f64,
    pub eps_den: f64,
    pub grad_averaging: GradAveraging,
    pub centralized_start: StartMode,
    pub aggregation: AggregationWeighting,
    /// Trailing rounds averaged for the buffer condition number; default is 3/4 of the run.
    pub cond_window: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: MethodVariant::FedKace,
            clients: 5,
            rounds: 30,
            c_max: 20,
            window: 5,
            overlap: 2,
            capacity: 200,
            epochs: 20,
            batch_size: 32,
            lr0: 0.01,
            weight_decay: 0.001,
            optimizer: OptimizerKind::Adamw,
            feature_dim: 16,
            hidden_dim: 32,
            n_per_cat: 100,
            n_test_per_cat: 50,
            noise_sigma: 0.5,
            separation: 1.0,
            seed: 1,
            output: default_output(),
            workers: 0,
            log_base: std::f64::consts::E,
            lambda_max: 1e3,
            eps_den: 1e-12,
            grad_averaging: GradAveraging::Vector,
            centralized_start: StartMode::Cold,
            aggregation: AggregationWeighting::Auto,
            cond_window: None,
        }
    }
}

fn default_output() -> PathBuf {
    std::env::var_os(OUTPUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("clients", self.clients),
            ("c_max", self.c_max),
            ("window", self.window),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("feature_dim", self.feature_dim),
            ("hidden_dim", self.hidden_dim),
            ("n_per_cat", self.n_per_cat),
            ("n_test_per_cat", self.n_test_per_cat),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(FedError::config(key, "must be at least 1"));
            }
        }
        if self.window > self.c_max {
            return Err(FedError::config(
                "window",
                format!("must not exceed c_max ({})", self.c_max),
            ));
        }
        if self.overlap > self.window {
            return Err(FedError::config(
                "overlap",
                format!("must not exceed window ({})", self.window),
            ));
        }
        let nonneg = [
            ("lr0", self.lr0),
            ("weight_decay", self.weight_decay),
            ("noise_sigma", self.noise_sigma),
            ("lambda_max", self.lambda_max),
        ];
        for (key, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(FedError::config(key, "must be finite and non-negative"));
            }
        }
        if !(self.eps_den.is_finite() && self.eps_den > 0.0) {
            return Err(FedError::config("eps_den", "must be finite and positive"));
        }
        if !(self.log_base.is_finite() && self.log_base > 1.0) {
            return Err(FedError::config("log_base", "must be finite and greater than 1"));
        }
        if !self.separation.is_finite() {
            return Err(FedError::config("separation", "must be finite"));
        }
        if self.cond_window == Some(0) {
            return Err(FedError::config("cond_window", "must be at least 1"));
        }
        self.schedule().validate()
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            c_max: self.c_max,
            clients: self.clients,
            rounds: self.rounds,
            window: self.window,
            overlap: self.overlap,
            n_per_cat: self.n_per_cat,
            n_test_per_cat: self.n_test_per_cat,
            feature_dim: self.feature_dim,
            noise_sigma: self.noise_sigma,
            separation: self.separation,
            seed: self.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.lr0,
            weight_decay: self.weight_decay,
            optimizer: self.optimizer,
            lambda_mode: LambdaMode::Adaptive,
            averaging: self.grad_averaging,
            lambda_max: self.lambda_max,
            eps_den: self.eps_den,
        }
    }

    pub fn log_base(&self) -> LogBase {
        LogBase(self.log_base)
    }

    /// Trailing window used for the buffer condition number summary.
    pub fn cond_window(&self) -> usize {
        self.cond_window
            .unwrap_or_else(|| (3 * self.rounds).div_ceil(4))
            .min(self.rounds)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FedError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let key = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "config".to_string());
            FedError::config(key, msg)
        })
    }
}

/// Command-line overrides; every flag is optional and wins over the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML file with any subset of the configuration keys
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// fedkace, fedavg, localkace (lkc), centralized, as1 .. as7
    #[arg(long)]
    pub method: Option<MethodVariant>,
    #[arg(long)]
    pub clients: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub c_max: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub overlap: Option<usize>,
    #[arg(long)]
    pub capacity: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub n_per_cat: Option<usize>,
    #[arg(long)]
    pub n_test_per_cat: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: $FEDKACE_OUT or ./runs)
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub log_base: Option<f64>,
    #[arg(long)]
    pub lambda_max: Option<f64>,
    #[arg(long)]
    pub eps_den: Option<f64>,
    /// vector or squared_norm
    #[arg(long, value_parser = parse_averaging)]
    pub grad_averaging: Option<GradAveraging>,
    /// warm or cold
    #[arg(long, value_parser = parse_start)]
    pub centralized_start: Option<StartMode>,
    /// auto, uniform or sample_count
    #[arg(long, value_parser = parse_weighting)]
    pub aggregation: Option<AggregationWeighting>,
    #[arg(long)]
    pub cond_window: Option<usize>,
}

fn parse_enum<T: for<'de> Deserialize<'de>>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_optimizer(s: &str) -> std::result::Result<OptimizerKind, String> {
    parse_enum(s)
}

fn parse_averaging(s: &str) -> std::result::Result<GradAveraging, String> {
    parse_enum(s)
}

fn parse_start(s: &str) -> std::result::Result<StartMode, String> {
    parse_enum(s)
}

fn parse_weighting(s: &str) -> std::result::Result<AggregationWeighting, String> {
    parse_enum(s)
}

/// Resolves defaults, then the config file, then flags, and validates the result.
pub fn parse_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_toml_file(path)?,
        None => ExperimentConfig::default(),
    };
    macro_rules! apply {
        ($($field:ident),*) => {
            $(if let Some(v) = args.$field.clone() { cfg.$field = v; })*
        };
    }
    apply!(
        method,
        clients,
        rounds,
        c_max,
        window,
        overlap,
        capacity,
        epochs,
        batch_size,
        lr0,
        weight_decay,
        optimizer,
        feature_dim,
        hidden_dim,
        n_per_cat,
        n_test_per_cat,
        noise_sigma,
        separation,
        seed,
        output,
        workers,
        log_base,
        lambda_max,
        eps_den,
        grad_averaging,
        centralized_start,
        aggregation
    );
    if args.cond_window.is_some() {
        cfg.cond_window = args.cond_window;
    }
    cfg.validate()?;
    Ok(cfg)
}
