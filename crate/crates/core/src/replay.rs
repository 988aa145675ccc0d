//! Local training for one round: interleaved task and replay batches with a
//! replay weight re-estimated after every epoch from the ratio of squared
//! output-layer gradient norms.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::Buffer;
use crate::data::{RoundTask, Sample};
use crate::error::{FedError, Result};
use crate::model::{ce_loss_and_grad, CategoryMask, ModelParams, OptimizerKind, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    Adaptive,
    Fixed(f64),
}

/// How per-batch gradients are combined within an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradAveraging {
    /// Squared norm of the mean gradient vector.
    Vector,
    /// Mean of the per-batch squared norms.
    SquaredNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub lambda_mode: LambdaMode,
    pub averaging: GradAveraging,
    pub lambda_max: f64,
    pub eps_den: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            lr0: 0.01,
            weight_decay: 0.001,
            optimizer: OptimizerKind::Adamw,
            lambda_mode: LambdaMode::Adaptive,
            averaging: GradAveraging::Vector,
            lambda_max: 1e3,
            eps_den: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct GradAccumulator {
    sum: Vec<f64>,
    norm_sq_sum: f64,
    batches: usize,
}

impl GradAccumulator {
    fn add(&mut self, g: &[f64]) {
        if self.sum.is_empty() {
            self.sum = vec![0.0; g.len()];
        }
        for (s, v) in self.sum.iter_mut().zip(g) {
            *s += v;
        }
        self.norm_sq_sum += g.iter().map(|v| v * v).sum::<f64>();
        self.batches += 1;
    }

    fn magnitude(&self, averaging: GradAveraging) -> f64 {
        let n = self.batches as f64;
        match averaging {
            GradAveraging::Vector => self.sum.iter().map(|s| (s / n) * (s / n)).sum(),
            GradAveraging::SquaredNorm => self.norm_sq_sum / n,
        }
    }
}

/// The replay weight and the gradient statistics gathered during the current epoch.
#[derive(Debug, Clone)]
pub struct ReplayWeightState {
    pub lambda: f64,
    task: GradAccumulator,
    replay: GradAccumulator,
}

impl Default for ReplayWeightState {
    fn default() -> Self {
        ReplayWeightState {
            lambda: 1.0,
            task: GradAccumulator::default(),
            replay: GradAccumulator::default(),
        }
    }
}

impl ReplayWeightState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate_task(&mut self, output_grad: &[f64]) {
        self.task.add(output_grad);
    }

    pub fn accumulate_replay(&mut self, output_grad: &[f64]) {
        self.replay.add(output_grad);
    }

    pub fn task_batches(&self) -> usize {
        self.task.batches
    }

    pub fn replay_batches(&self) -> usize {
        self.replay.batches
    }

    /// Squared gradient magnitudes `(task, replay)` of the epoch so far.
    pub fn magnitudes(&self, averaging: GradAveraging) -> (Option<f64>, Option<f64>) {
        let m = |a: &GradAccumulator| (a.batches > 0).then(|| a.magnitude(averaging));
        (m(&self.task), m(&self.replay))
    }

    /// Ends the epoch: `λ = |g_rep|² / max(|g_task|², ε)` clamped to `[0, λ_max]`,
    /// unchanged when no replay batch was seen. Accumulators are cleared.
    pub fn update_lambda(&mut self, averaging: GradAveraging, eps_den: f64, lambda_max: f64) -> f64 {
        if let (Some(task), Some(rep)) = self.magnitudes(averaging) {
            self.lambda = lambda_ratio(rep, task, eps_den, lambda_max);
        }
        self.task = GradAccumulator::default();
        self.replay = GradAccumulator::default();
        self.lambda
    }
}

pub fn lambda_ratio(replay_sq: f64, task_sq: f64, eps_den: f64, lambda_max: f64) -> f64 {
    (replay_sq / task_sq.max(eps_den)).clamp(0.0, lambda_max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// Replay weight used during this epoch.
    pub lambda: f64,
    pub task_loss: f64,
    pub replay_loss: Option<f64>,
    /// Squared output-layer gradient magnitudes the next λ is computed from.
    pub task_grad_sq: f64,
    pub replay_grad_sq: Option<f64>,
    /// Same ratio computed from full-model gradients, for comparison only.
    pub full_model_ratio: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LocalTrainReport {
    pub model: ModelParams,
    pub epochs: Vec<EpochLog>,
}

impl LocalTrainReport {
    pub fn lambda_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.lambda).collect()
    }

    pub fn mean_lambda(&self) -> f64 {
        if self.epochs.is_empty() {
            return 1.0;
        }
        self.epochs.iter().map(|e| e.lambda).sum::<f64>() / self.epochs.len() as f64
    }
}

/// Cycles through the buffer in shuffled order, reshuffling when exhausted.
struct ReplayCursor<'a> {
    items: Vec<&'a Sample>,
    pos: usize,
}

impl<'a> ReplayCursor<'a> {
    fn next_batch<R: Rng>(&mut self, size: usize, rng: &mut R) -> Vec<&'a Sample> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == 0 {
                self.items.shuffle(rng);
            }
            out.push(self.items[self.pos]);
            self.pos = (self.pos + 1) % self.items.len();
        }
        out
    }
}

/// Trains `global` on the round's task data plus the buffer for `cfg.epochs` epochs.
///
/// The task loss is masked to the round's categories and the replay loss to
/// the categories seen before this round.
pub fn train_round<R: Rng>(
    global: &ModelParams,
    task: &RoundTask,
    buffer: &Buffer,
    seen_before: &CategoryMask,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<LocalTrainReport> {
    if task.samples.is_empty() {
        return Err(FedError::Contract(format!(
            "client {} round {} has no task data",
            task.client, task.round
        )));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(FedError::config("epochs", "epochs and batch size must be positive"));
    }
    let task_mask = CategoryMask::new(task.categories.iter().copied(), global.c_max())?;
    let replay: Vec<&Sample> = buffer.samples();
    if let Some(bad) = replay.iter().find(|s| !seen_before.contains(s.label)) {
        return Err(FedError::BufferCorruption(format!(
            "buffered sample {} has label {} outside the historical categories",
            bad.id, bad.label
        )));
    }
    let diverged = |e: FedError| match e {
        FedError::NonFinite(detail) => FedError::Diverged {
            client: task.client,
            round: task.round,
            detail,
        },
        other => other,
    };

    let mut model = global.clone();
    let mut opt = OptimizerState::new(cfg.optimizer, &model, cfg.lr0, cfg.weight_decay, cfg.epochs);
    let mut weights = ReplayWeightState::new();
    if let LambdaMode::Fixed(v) = cfg.lambda_mode {
        weights.lambda = v;
    }
    let mut cursor = ReplayCursor { items: replay, pos: 0 };
    let replay_size = cfg.batch_size.min(cursor.items.len());

    let mut order: Vec<&Sample> = task.samples.iter().collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lambda = weights.lambda;
        order.shuffle(rng);
        let (mut task_loss, mut rep_loss, mut steps) = (0.0, 0.0, 0usize);
        let mut full_task = GradAccumulator::default();
        let mut full_rep = GradAccumulator::default();

        for batch in order.chunks(cfg.batch_size) {
            let (lt, mut grad) = ce_loss_and_grad(&model, batch, &task_mask, false)?;
            weights.accumulate_task(&grad.output_layer_vec());
            full_task.add(&grad.flatten());
            task_loss += lt;
            if replay_size > 0 {
                let rb = cursor.next_batch(replay_size, rng);
                let (lr, gr) = ce_loss_and_grad(&model, &rb, seen_before, false)?;
                weights.accumulate_replay(&gr.output_layer_vec());
                full_rep.add(&gr.flatten());
                rep_loss += lr;
                grad.add_scaled(&gr, lambda);
            }
            steps += 1;
            opt.step(&mut model, &grad, epoch).map_err(diverged)?;
        }

        let (task_sq, rep_sq) = weights.magnitudes(cfg.averaging);
        let full_model_ratio = (full_rep.batches > 0).then(|| {
            lambda_ratio(
                full_rep.magnitude(cfg.averaging),
                full_task.magnitude(cfg.averaging),
                cfg.eps_den,
                f64::INFINITY,
            )
        });
        logs.push(EpochLog {
            lambda,
            task_loss: task_loss / steps as f64,
            replay_loss: (replay_size > 0).then(|| rep_loss / steps as f64),
            task_grad_sq: task_sq.unwrap_or(0.0),
            replay_grad_sq: rep_sq,
            full_model_ratio,
        });
        let next = weights.update_lambda(cfg.averaging, cfg.eps_den, cfg.lambda_max);
        weights.lambda = match cfg.lambda_mode {
            LambdaMode::Adaptive => next,
            LambdaMode::Fixed(v) => v,
        };
    }
    Ok(LocalTrainReport { model, epochs: logs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buffer::{score_samples, ScoredItem};
    use crate::data::{DataStream, ScheduleConfig};
    use crate::model::ce_loss;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lambda_rule_cases() {
        let mut s = ReplayWeightState::new();
        assert_eq!(s.lambda, 1.0);
        s.accumulate_task(&[1.0, -2.0]);
        s.accumulate_replay(&[1.0, -2.0]);
        assert_eq!(s.update_lambda(GradAveraging::Vector, 1e-12, 1e3), 1.0);

        s.accumulate_task(&[1.0, -2.0]);
        s.accumulate_replay(&[2.0, -4.0]);
        assert_eq!(s.update_lambda(GradAveraging::Vector, 1e-12, 1e3), 4.0);

        s.accumulate_task(&[1e-9, 0.0]);
        s.accumulate_replay(&[1.0, 0.0]);
        assert_eq!(s.update_lambda(GradAveraging::Vector, 1e-12, 1e3), 1e3);

        // no replay batches: unchanged
        s.lambda = 2.5;
        s.accumulate_task(&[1.0, 1.0]);
        assert_eq!(s.update_lambda(GradAveraging::Vector, 1e-12, 1e3), 2.5);
        assert_eq!(s.task_batches(), 0);
    }

    #[test]
    fn vector_and_norm_averaging_differ() {
        let mut s = ReplayWeightState::new();
        s.accumulate_task(&[1.0]);
        s.accumulate_task(&[1.0]);
        s.accumulate_replay(&[1.0]);
        s.accumulate_replay(&[-1.0]);
        let mut t = s.clone();
        assert_eq!(s.update_lambda(GradAveraging::Vector, 1e-12, 1e3), 0.0);
        assert_eq!(t.update_lambda(GradAveraging::SquaredNorm, 1e-12, 1e3), 1.0);
    }

    fn stream(c_max: usize, window: usize, n: usize, seed: u64) -> DataStream {
        DataStream::new(ScheduleConfig {
            c_max,
            clients: 1,
            rounds: 4,
            window,
            overlap: 0,
            n_per_cat: n,
            n_test_per_cat: 10,
            feature_dim: 4,
            noise_sigma: 0.5,
            separation: 2.0,
            seed,
        })
        .unwrap()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn empty_buffer_keeps_lambda_at_one() {
        let ds = stream(4, 2, 10, 1);
        let sched = ds.build_schedule(0);
        let task = ds.draw_round_data(0, 1, &sched[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = ModelParams::init(4, 6, 4, &mut rng);
        let rep = train_round(
            &model,
            &task,
            &Buffer::new(10, 4),
            &CategoryMask::empty(4),
            &cfg(4),
            &mut rng,
        )
        .unwrap();
        assert_eq!(rep.lambda_trace(), vec![1.0; 4]);
        assert!(rep.epochs.iter().all(|e| e.replay_loss.is_none()));
    }

    #[test]
    fn one_epoch_reduces_task_loss() {
        let ds = stream(2, 2, 40, 2);
        let sched = ds.build_schedule(0);
        let task = ds.draw_round_data(0, 1, &sched[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = ModelParams::init(4, 8, 2, &mut rng);
        let mask = CategoryMask::new(task.categories.clone(), 2).unwrap();
        let refs: Vec<&Sample> = task.samples.iter().collect();
        let before = ce_loss(&model, &refs, &mask).unwrap();
        let rep = train_round(
            &model,
            &task,
            &Buffer::new(0, 2),
            &CategoryMask::empty(2),
            &cfg(1),
            &mut rng,
        )
        .unwrap();
        let after = ce_loss(&rep.model, &refs, &mask).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    fn mirror_buffer(task: &RoundTask, model: &ModelParams, c_max: usize) -> (Buffer, CategoryMask) {
        let seen = CategoryMask::new(task.categories.iter().copied(), c_max).unwrap();
        let refs: Vec<&Sample> = task.samples.iter().collect();
        // different ids, same content
        let copies: Vec<Sample> = refs
            .iter()
            .map(|s| Sample {
                id: s.id + 1_000_000,
                ..(*s).clone()
            })
            .collect();
        let copy_refs: Vec<&Sample> = copies.iter().collect();
        let items: Vec<ScoredItem> = score_samples(model, &copy_refs, &seen).unwrap();
        (Buffer::from_items(items.len(), seen.clone(), items).unwrap(), seen)
    }

    #[test]
    fn mirrored_buffer_keeps_lambda_in_band() {
        for seed in 0..5 {
            let ds = stream(4, 2, 32, seed);
            let sched = ds.build_schedule(0);
            let task = ds.draw_round_data(0, 1, &sched[0]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = ModelParams::init(4, 6, 4, &mut rng);
            let (buf, seen) = mirror_buffer(&task, &model, 4);
            let rep = train_round(&model, &task, &buf, &seen, &cfg(6), &mut rng).unwrap();
            for l in rep.lambda_trace() {
                assert!((1.0 / 3.0..=3.0).contains(&l), "seed {seed}: {l}");
            }
        }
    }

    #[test]
    fn lambda_trace_recomputes_from_logs() {
        let ds = stream(4, 2, 24, 3);
        let sched = ds.build_schedule(0);
        let task = ds.draw_round_data(0, 1, &sched[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = ModelParams::init(4, 6, 4, &mut rng);
        let (buf, seen) = mirror_buffer(&task, &model, 4);
        let c = cfg(5);
        let rep = train_round(&model, &task, &buf, &seen, &c, &mut rng).unwrap();
        assert_eq!(rep.epochs[0].lambda, 1.0);
        for w in rep.epochs.windows(2) {
            let expect = lambda_ratio(w[0].replay_grad_sq.unwrap(), w[0].task_grad_sq, c.eps_den, c.lambda_max);
            assert_eq!(w[1].lambda, expect);
            assert!(w[1].lambda >= 0.0);
        }
    }

    #[test]
    fn fixed_lambda_is_pinned() {
        let ds = stream(4, 2, 16, 4);
        let sched = ds.build_schedule(0);
        let task = ds.draw_round_data(0, 1, &sched[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = ModelParams::init(4, 6, 4, &mut rng);
        let (buf, seen) = mirror_buffer(&task, &model, 4);
        let c = TrainConfig {
            lambda_mode: LambdaMode::Fixed(1.0),
            ..cfg(4)
        };
        let rep = train_round(&model, &task, &buf, &seen, &c, &mut rng).unwrap();
        assert_eq!(rep.lambda_trace(), vec![1.0; 4]);
    }

    #[test]
    fn corrupt_buffer_is_rejected() {
        let ds = stream(4, 2, 8, 5);
        let sched = ds.build_schedule(0);
        let task = ds.draw_round_data(0, 1, &sched[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = ModelParams::init(4, 6, 4, &mut rng);
        let (buf, _) = mirror_buffer(&task, &model, 4);
        let wrong = CategoryMask::new([sched[1][0]], 4).unwrap();
        assert!(matches!(
            train_round(&model, &task, &buf, &wrong, &cfg(1), &mut rng),
            Err(FedError::BufferCorruption(_))
        ));
    }
}
