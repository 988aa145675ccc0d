//! End-to-end run: the selected method, its paired Centralized reference,
//! regret, summary and files on disk.

use std::fs;
use std::path::PathBuf;

use crate::config::ExperimentConfig;
use crate::error::{FedError, Result};
use crate::federation::{run_experiment_with, MethodVariant, RunRecord};
use crate::metrics::{attach_regret, run_id, summarize, write_outputs, RunSummary};

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Skip the Centralized reference run; regret columns stay empty.
    pub no_regret: bool,
    pub dump_buffers: bool,
}

#[derive(Debug, Clone)]
pub struct CompletedRun {
    pub record: RunRecord,
    pub summary: RunSummary,
}

/// Runs `cfg` and, unless disabled, a Centralized run with the same seed to
/// fill regret. Centralized itself is its own reference.
pub fn run_paired(cfg: &ExperimentConfig, opts: RunOptions) -> Result<CompletedRun> {
    let mut record = run_experiment_with(cfg, opts.dump_buffers)?;
    if !opts.no_regret {
        if cfg.method == MethodVariant::Centralized {
            let reference = record.rounds.clone();
            attach_regret(&mut record.rounds, &reference)?;
        } else {
            let reference_cfg = ExperimentConfig {
                method: MethodVariant::Centralized,
                ..cfg.clone()
            };
            let reference = run_experiment_with(&reference_cfg, false)?;
            attach_regret(&mut record.rounds, &reference.rounds)?;
        }
    }
    let summary = summarize(&record, cfg);
    Ok(CompletedRun { record, summary })
}

/// Directory a run writes into: `<output>/<method>-seed<seed>`.
pub fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.join(run_id(cfg))
}

/// Runs and writes `rounds.csv`, `summary.json` and optionally `buffers.csv`.
pub fn execute(cfg: &ExperimentConfig, opts: RunOptions) -> Result<(CompletedRun, PathBuf)> {
    let done = run_paired(cfg, opts)?;
    let dir = run_dir(cfg);
    write_outputs(&dir, &done.record.rounds, &done.summary)?;
    if opts.dump_buffers {
        let path = dir.join("buffers.csv");
        let mut text = String::from(crate::buffer::DUMP_HEADER);
        text.push('\n');
        for line in &done.record.buffer_dump {
            text.push_str(line);
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| FedError::io(&path, e))?;
    }
    Ok((done, dir))
}
