//! Round orchestration across clients and the server, plus the registry of
//! methods and ablations.
//!
//! Each round runs, per client: receive the previous global model, train
//! locally with replay, rebuild the buffer; then the server aggregates the
//! local models; finally each client checks the inference switch against the
//! new global model on its updated buffer and is evaluated.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::buffer::{compute_beta, condition_number, maintain, Buffer, MaintenanceInputs, SelectionPolicy};
use crate::config::{AggregationWeighting, ExperimentConfig, StartMode};
use crate::data::{DataStream, RoundTask, Sample};
use crate::error::{FedError, Result};
use crate::metrics::{eval_accuracy, ClientRoundMetrics, RoundMetrics};
use crate::model::{params_average, params_weighted_average, CategoryMask, ModelParams};
use crate::replay::{train_round, LambdaMode, TrainConfig};
use crate::rng::{stream_rng, Stream};
use crate::switch::{evaluate_gap, inference_model, GapMonitorState, InferencePolicy, SwitchRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodVariant {
    FedKace,
    FedAvg,
    #[serde(alias = "lkc")]
    LocalKace,
    Centralized,
    /// Switch after a single round of shrinking gap.
    As1,
    /// Always infer with the global model.
    As2,
    /// Always infer with the local model.
    As3,
    /// Replay weight fixed to 1.
    As4,
    /// IDV-weighted sampling for every category, no CDV stage.
    As5,
    /// Category-balanced random buffer.
    As6,
    /// Fixed replay weight and category-balanced random buffer.
    As7,
}

impl MethodVariant {
    pub const ALL: [MethodVariant; 11] = [
        MethodVariant::FedKace,
        MethodVariant::FedAvg,
        MethodVariant::LocalKace,
        MethodVariant::Centralized,
        MethodVariant::As1,
        MethodVariant::As2,
        MethodVariant::As3,
        MethodVariant::As4,
        MethodVariant::As5,
        MethodVariant::As6,
        MethodVariant::As7,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MethodVariant::FedKace => "fedkace",
            MethodVariant::FedAvg => "fedavg",
            MethodVariant::LocalKace => "localkace",
            MethodVariant::Centralized => "centralized",
            MethodVariant::As1 => "as1",
            MethodVariant::As2 => "as2",
            MethodVariant::As3 => "as3",
            MethodVariant::As4 => "as4",
            MethodVariant::As5 => "as5",
            MethodVariant::As6 => "as6",
            MethodVariant::As7 => "as7",
        }
    }

    /// The component settings this variant runs with.
    pub fn spec(&self) -> VariantSpec {
        let base = VariantSpec {
            aggregation: Aggregation::Mean,
            buffer: Some(SelectionPolicy::KernelTwoStage),
            lambda: LambdaMode::Adaptive,
            switch_rule: Some(SwitchRule::TwoConsecutive),
            inference: InferencePolicy::Adaptive,
            centralized: false,
        };
        match self {
            MethodVariant::FedKace => base,
            MethodVariant::FedAvg => VariantSpec {
                aggregation: Aggregation::SampleWeighted,
                buffer: None,
                switch_rule: None,
                inference: InferencePolicy::AlwaysGlobal,
                ..base
            },
            MethodVariant::LocalKace => VariantSpec {
                aggregation: Aggregation::Identity,
                ..base
            },
            MethodVariant::Centralized => VariantSpec {
                aggregation: Aggregation::Identity,
                buffer: None,
                switch_rule: None,
                inference: InferencePolicy::AlwaysLocal,
                centralized: true,
                ..base
            },
            MethodVariant::As1 => VariantSpec {
                switch_rule: Some(SwitchRule::SingleDrop),
                ..base
            },
            MethodVariant::As2 => VariantSpec {
                switch_rule: None,
                inference: InferencePolicy::AlwaysGlobal,
                ..base
            },
            MethodVariant::As3 => VariantSpec {
                switch_rule: None,
                inference: InferencePolicy::AlwaysLocal,
                ..base
            },
            MethodVariant::As4 => VariantSpec {
                lambda: LambdaMode::Fixed(1.0),
                ..base
            },
            MethodVariant::As5 => VariantSpec {
                buffer: Some(SelectionPolicy::IdvSampling),
                ..base
            },
            MethodVariant::As6 => VariantSpec {
                buffer: Some(SelectionPolicy::BalancedRandom),
                ..base
            },
            MethodVariant::As7 => VariantSpec {
                lambda: LambdaMode::Fixed(1.0),
                buffer: Some(SelectionPolicy::BalancedRandom),
                ..base
            },
        }
    }
}

impl fmt::Display for MethodVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodVariant {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| FedError::config("method", format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Unweighted mean of all local models.
    Mean,
    /// Mean weighted by each client's round sample count.
    SampleWeighted,
    /// No server: every client keeps its own model.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub aggregation: Aggregation,
    /// `None` disables the buffer and replay entirely.
    pub buffer: Option<SelectionPolicy>,
    pub lambda: LambdaMode,
    /// `None` skips gap monitoring.
    pub switch_rule: Option<SwitchRule>,
    pub inference: InferencePolicy,
    /// Trains each client on its cumulative data instead of a stream.
    pub centralized: bool,
}

impl VariantSpec {
    fn with_weighting(mut self, w: AggregationWeighting) -> Self {
        if self.aggregation != Aggregation::Identity {
            match w {
                AggregationWeighting::Auto => {}
                AggregationWeighting::Uniform => self.aggregation = Aggregation::Mean,
                AggregationWeighting::SampleCount => self.aggregation = Aggregation::SampleWeighted,
            }
        }
        self
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub schedule: Vec<Vec<usize>>,
    /// θ_k^{t,J} of the latest round.
    pub local: ModelParams,
    /// The model this client starts its next round from.
    pub received: ModelParams,
    pub buffer: Buffer,
    /// Categories seen up to and including the latest round.
    pub seen: CategoryMask,
    pub monitor: GapMonitorState,
    /// Full data history, kept only by the centralized baseline.
    pub cumulative: Vec<Sample>,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub global: ModelParams,
    pub round: usize,
}

/// Everything a run needs between rounds.
pub struct Federation {
    cfg: ExperimentConfig,
    spec: VariantSpec,
    train: TrainConfig,
    stream: DataStream,
    tests: Vec<Vec<Sample>>,
    initial: ModelParams,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub buffer_dump: Option<Vec<String>>,
}

struct LocalStep {
    lambda_trace: Vec<f64>,
    lambda_mean: f64,
    samples: usize,
}

impl Federation {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let stream = DataStream::new(cfg.schedule())?;
        let spec = Self::resolved_spec(cfg);
        let mut train = cfg.train();
        train.lambda_mode = spec.lambda;
        let mut init_rng = stream_rng(cfg.seed, Stream::Init, [0, 0, 0]);
        let initial = ModelParams::init(cfg.feature_dim, cfg.hidden_dim, cfg.c_max, &mut init_rng);
        let tests = (0..cfg.c_max).map(|c| stream.test_set(&BTreeSet::from([c]))).collect();
        let clients = (0..cfg.clients)
            .map(|k| ClientState {
                id: k,
                schedule: stream.build_schedule(k),
                local: initial.clone(),
                received: initial.clone(),
                buffer: Buffer::new(cfg.capacity, cfg.c_max),
                seen: CategoryMask::empty(cfg.c_max),
                monitor: GapMonitorState::default(),
                cumulative: Vec::new(),
            })
            .collect();
        Ok(Federation {
            cfg: cfg.clone(),
            spec,
            train,
            stream,
            tests,
            server: ServerState {
                global: initial.clone(),
                round: 0,
            },
            initial,
            clients,
            buffer_dump: None,
        })
    }

    /// The variant's settings after config overrides such as aggregation weighting.
    pub fn resolved_spec(cfg: &ExperimentConfig) -> VariantSpec {
        cfg.method.spec().with_weighting(cfg.aggregation)
    }

    pub fn spec(&self) -> &VariantSpec {
        &self.spec
    }

    pub fn enable_buffer_dump(&mut self) {
        self.buffer_dump = Some(Vec::new());
    }

    /// Runs round `server.round + 1` and returns its metrics.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let t = self.server.round + 1;
        if t > self.cfg.rounds {
            return Err(FedError::Contract(format!(
                "round {t} exceeds the configured {}",
                self.cfg.rounds
            )));
        }
        let cfg = &self.cfg;
        let spec = self.spec;
        let train = &self.train;
        let stream = &self.stream;
        let initial = &self.initial;

        // (1)-(3): local training and buffer maintenance
        let steps: Vec<LocalStep> = self
            .clients
            .par_iter_mut()
            .map(|client| local_step(client, t, cfg, &spec, train, stream, initial))
            .collect::<Result<_>>()?;

        // aggregation barrier
        match spec.aggregation {
            Aggregation::Identity => {
                for c in &mut self.clients {
                    c.received = c.local.clone();
                }
            }
            agg => {
                let models: Vec<&ModelParams> = self.clients.iter().map(|c| &c.local).collect();
                let global = match agg {
                    Aggregation::Mean => params_average(&models)?,
                    _ => {
                        let w: Vec<f64> = steps.iter().map(|s| s.samples as f64).collect();
                        params_weighted_average(&models, &w)?
                    }
                };
                for c in &mut self.clients {
                    c.received = global.clone();
                }
                self.server.global = global;
            }
        }
        self.server.round = t;

        // switch check and evaluation
        let tests = &self.tests;
        let rows: Vec<ClientRoundMetrics> = self
            .clients
            .par_iter_mut()
            .zip(steps.par_iter())
            .map(|(client, step)| finish_round(client, step, t, &spec, tests))
            .collect::<Result<_>>()?;

        if let Some(dump) = self.buffer_dump.as_mut() {
            for c in &self.clients {
                dump.extend(c.buffer.dump_lines(t, c.id));
            }
        }
        Ok(RoundMetrics {
            round: t,
            clients: rows,
        })
    }
}

fn local_step(
    client: &mut ClientState,
    t: usize,
    cfg: &ExperimentConfig,
    spec: &VariantSpec,
    train: &TrainConfig,
    stream: &DataStream,
    initial: &ModelParams,
) -> Result<LocalStep> {
    let window = client.schedule[t - 1].clone();
    let task = stream.draw_round_data(client.id, t, &window);
    let samples = task.samples.len();
    let seen_before = client.seen.clone();
    let seen_now = seen_before.union(&CategoryMask::new(window.iter().copied(), cfg.c_max)?);
    let mut shuffle = stream_rng(cfg.seed, Stream::Shuffle, [client.id as u64, t as u64, 0]);

    if spec.centralized {
        client.cumulative.extend(task.samples);
        let all = RoundTask {
            client: client.id,
            round: t,
            categories: seen_now.ids().to_vec(),
            samples: client.cumulative.clone(),
        };
        let start = match cfg.centralized_start {
            StartMode::Warm => &client.local,
            StartMode::Cold => initial,
        };
        let empty = Buffer::new(0, cfg.c_max);
        let report = train_round(start, &all, &empty, &seen_before, train, &mut shuffle)?;
        client.local = report.model.clone();
        client.seen = seen_now;
        return Ok(LocalStep {
            lambda_trace: report.lambda_trace(),
            lambda_mean: report.mean_lambda(),
            samples,
        });
    }

    let replay = if spec.buffer.is_some() {
        client.buffer.clone()
    } else {
        Buffer::new(0, cfg.c_max)
    };
    let report = train_round(&client.received, &task, &replay, &seen_before, train, &mut shuffle)?;

    if let Some(policy) = spec.buffer {
        let mut sampling = stream_rng(cfg.seed, Stream::Sampling, [client.id as u64, t as u64, 0]);
        let inputs = MaintenanceInputs {
            old_buffer: &client.buffer,
            new_data: &task.samples,
            model: &report.model,
            old_categories: &seen_before,
            all_categories: &seen_now,
            log_base: cfg.log_base(),
        };
        client.buffer = maintain(&inputs, policy, &mut sampling)?;
    }
    client.local = report.model.clone();
    client.seen = seen_now;
    Ok(LocalStep {
        lambda_trace: report.lambda_trace(),
        lambda_mean: report.mean_lambda(),
        samples,
    })
}

fn finish_round(
    client: &mut ClientState,
    step: &LocalStep,
    t: usize,
    spec: &VariantSpec,
    tests: &[Vec<Sample>],
) -> Result<ClientRoundMetrics> {
    if let Some(rule) = spec.switch_rule {
        if !client.monitor.switched && !client.buffer.is_empty() {
            let reading = evaluate_gap(&client.received, &client.buffer, &client.seen)?;
            client.monitor.observe(t, reading.gap, rule);
        }
    }
    let model = inference_model(&client.monitor, &client.local, &client.received, spec.inference);
    let test: Vec<&Sample> = client.seen.ids().iter().flat_map(|&c| tests[c].iter()).collect();
    let acc = eval_accuracy(model, &client.seen, &test)?;
    let buffer_cond = if spec.buffer.is_some() {
        condition_number(&client.buffer, compute_beta(client.buffer.len(), client.seen.len()))
    } else {
        None
    };
    Ok(ClientRoundMetrics {
        client: client.id,
        acc,
        regret: None,
        lambda_mean: step.lambda_mean,
        lambda_trace: step.lambda_trace.clone(),
        switched: client.monitor.switched,
        buffer_size: client.buffer.len(),
        buffer_cond,
    })
}

/// Output of a complete run before regret pairing.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub method: MethodVariant,
    pub seed: u64,
    pub rounds: Vec<RoundMetrics>,
    pub t_switch: Vec<Option<usize>>,
    /// Distinct categories each client saw by the end of the run.
    pub coverage: Vec<usize>,
    pub buffer_dump: Vec<String>,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    run_experiment_with(cfg, false)
}

pub fn run_experiment_with(cfg: &ExperimentConfig, dump_buffers: bool) -> Result<RunRecord> {
    let mut fed = Federation::new(cfg)?;
    if dump_buffers {
        fed.enable_buffer_dump();
    }
    let body =
        |fed: &mut Federation| -> Result<Vec<RoundMetrics>> { (0..cfg.rounds).map(|_| fed.run_round()).collect() };
    let rounds = if cfg.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| FedError::config("workers", e.to_string()))?;
        pool.install(|| body(&mut fed))?
    } else {
        body(&mut fed)?
    };
    Ok(RunRecord {
        method: cfg.method,
        seed: cfg.seed,
        rounds,
        t_switch: fed.clients.iter().map(|c| c.monitor.t_switch).collect(),
        coverage: fed.clients.iter().map(|c| c.seen.len()).collect(),
        buffer_dump: fed.buffer_dump.unwrap_or_default(),
    })
}
