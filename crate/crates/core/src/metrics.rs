//! Accuracy, regret and run summaries, plus the CSV/JSON artifacts of a run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::data::Sample;
use crate::error::{FedError, Result};
use crate::federation::{Federation, MethodVariant, RunRecord};
use crate::fmt_real;
use crate::model::{forward, masked_argmax, CategoryMask, ModelParams};

pub const ROUNDS_HEADER: &str =
    "run_id,method,seed,round,client,acc,regret,lambda_mean,switched,buffer_size,buffer_cond";

#[derive(Debug, Clone, PartialEq)]
pub struct ClientRoundMetrics {
    pub client: usize,
    pub acc: f64,
    pub regret: Option<f64>,
    pub lambda_mean: f64,
    /// Replay weight used in each local epoch.
    pub lambda_trace: Vec<f64>,
    pub switched: bool,
    pub buffer_size: usize,
    pub buffer_cond: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub clients: Vec<ClientRoundMetrics>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl RoundMetrics {
    /// Client-averaged accuracy, each client weighted equally.
    pub fn mean_acc(&self) -> f64 {
        mean(self.clients.iter().map(|c| c.acc)).unwrap_or(0.0)
    }

    /// `None` until regret has been attached to every client.
    pub fn mean_regret(&self) -> Option<f64> {
        if self.clients.iter().any(|c| c.regret.is_none()) {
            return None;
        }
        mean(self.clients.iter().filter_map(|c| c.regret))
    }

    pub fn mean_cond(&self) -> Option<f64> {
        mean(self.clients.iter().filter_map(|c| c.buffer_cond))
    }
}

/// Fraction of `test` predicted correctly under the masked argmax.
pub fn eval_accuracy(model: &ModelParams, mask: &CategoryMask, test: &[&Sample]) -> Result<f64> {
    if test.is_empty() {
        return Err(FedError::UndefinedMetric("accuracy on an empty test set".into()));
    }
    let mut correct = 0usize;
    for s in test {
        if masked_argmax(&forward(model, &s.features)?, mask)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

pub fn regret(acc_centralized: f64, acc_method: f64) -> f64 {
    acc_centralized - acc_method
}

/// Fills each row's regret from the Centralized run with the same seed.
pub fn attach_regret(series: &mut [RoundMetrics], reference: &[RoundMetrics]) -> Result<()> {
    if series.len() != reference.len() {
        return Err(FedError::config(
            "regret",
            format!(
                "{} rounds paired with {} reference rounds",
                series.len(),
                reference.len()
            ),
        ));
    }
    for (r, c) in series.iter_mut().zip(reference) {
        if r.round != c.round || r.clients.len() != c.clients.len() {
            return Err(FedError::config(
                "regret",
                format!("round {} has no matching reference", r.round),
            ));
        }
        for (row, base) in r.clients.iter_mut().zip(&c.clients) {
            if row.client != base.client {
                return Err(FedError::config(
                    "regret",
                    format!("round {} client {} has no matching reference", r.round, row.client),
                ));
            }
            row.regret = Some(regret(base.acc, row.acc));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub method: MethodVariant,
    pub seed: u64,
    pub rounds: usize,
    /// Mean over rounds of the client-averaged accuracy.
    pub aa: Option<f64>,
    /// Mean over rounds of the client-averaged regret, when paired.
    pub ar: Option<f64>,
    pub round_acc: Vec<f64>,
    pub round_regret: Option<Vec<f64>>,
    pub t_switch: Vec<Option<usize>>,
    pub coverage: Vec<usize>,
    pub cond_window: usize,
    /// Mean of the client-averaged condition number over the trailing window.
    pub cond_window_mean: Option<f64>,
    pub config: ExperimentConfig,
    pub decisions: BTreeMap<String, String>,
}

pub fn run_id(cfg: &ExperimentConfig) -> String {
    format!("{}-seed{}", cfg.method, cfg.seed)
}

pub fn summarize(record: &RunRecord, cfg: &ExperimentConfig) -> RunSummary {
    let round_acc: Vec<f64> = record.rounds.iter().map(RoundMetrics::mean_acc).collect();
    let round_regret: Option<Vec<f64>> = record.rounds.iter().map(RoundMetrics::mean_regret).collect();
    let round_regret = round_regret.filter(|r| !r.is_empty());
    let window = cfg.cond_window();
    let tail = record.rounds.len().saturating_sub(window);
    let cond_window_mean = mean(record.rounds[tail..].iter().filter_map(RoundMetrics::mean_cond));
    let spec = Federation::resolved_spec(cfg);
    let decisions = BTreeMap::from([
        ("log_base".to_string(), fmt_real(cfg.log_base)),
        ("lambda_max".to_string(), fmt_real(cfg.lambda_max)),
        ("eps_den".to_string(), fmt_real(cfg.eps_den)),
        ("grad_averaging".to_string(), format!("{:?}", cfg.grad_averaging)),
        ("aggregation".to_string(), format!("{:?}", spec.aggregation)),
        ("centralized_start".to_string(), format!("{:?}", cfg.centralized_start)),
        ("inference".to_string(), format!("{:?}", spec.inference)),
    ]);
    RunSummary {
        run_id: run_id(cfg),
        method: record.method,
        seed: record.seed,
        rounds: record.rounds.len(),
        aa: mean(round_acc.iter().copied()),
        ar: round_regret.as_ref().and_then(|r| mean(r.iter().copied())),
        round_acc,
        round_regret,
        t_switch: record.t_switch.clone(),
        coverage: record.coverage.clone(),
        cond_window: window,
        cond_window_mean,
        config: cfg.clone(),
        decisions,
    }
}

pub fn rounds_csv(run_id: &str, method: MethodVariant, seed: u64, series: &[RoundMetrics]) -> String {
    let mut out = String::from(ROUNDS_HEADER);
    out.push('\n');
    let opt = |v: Option<f64>| v.map(fmt_real).unwrap_or_default();
    for r in series {
        for c in &r.clients {
            let _ = writeln!(
                out,
                "{run_id},{method},{seed},{},{},{},{},{},{},{},{}",
                r.round,
                c.client,
                fmt_real(c.acc),
                opt(c.regret),
                fmt_real(c.lambda_mean),
                u8::from(c.switched),
                c.buffer_size,
                opt(c.buffer_cond),
            );
        }
    }
    out
}

/// Writes `rounds.csv` and `summary.json` into `dir`, creating it if needed.
pub fn write_outputs(dir: &Path, series: &[RoundMetrics], summary: &RunSummary) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FedError::io(dir, e))?;
    let csv_path = dir.join("rounds.csv");
    fs::write(
        &csv_path,
        rounds_csv(&summary.run_id, summary.method, summary.seed, series),
    )
    .map_err(|e| FedError::io(&csv_path, e))?;
    let json_path = dir.join("summary.json");
    let mut json =
        serde_json::to_string_pretty(summary).map_err(|e| FedError::Contract(format!("summary serialization: {e}")))?;
    json.push('\n');
    fs::write(&json_path, json).map_err(|e| FedError::io(&json_path, e))?;
    Ok(())
}
