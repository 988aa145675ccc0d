//! Acceptance checks: numerical properties of each component and the
//! directional benchmark comparing methods on the shared synthetic setup.

pub mod oracle;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::buffer::{allocate_quotas, maintain, Buffer, LogBase, MaintenanceInputs, ScoredItem, SelectionPolicy};
use crate::config::{ExperimentConfig, OUTPUT_ENV};
use crate::data::{DataStream, Sample, ScheduleConfig};
use crate::error::Result;
use crate::federation::{run_experiment, MethodVariant};
use crate::metrics::{summarize, write_outputs};
use crate::model::{ce_loss, ce_loss_and_grad, CategoryMask, ModelParams};
use crate::replay::{lambda_ratio, GradAveraging, ReplayWeightState};
use crate::runner::{execute, RunOptions};
use crate::switch::{GapMonitorState, SwitchRule};
use oracle::{oracle_maintain, OracleInstance};

pub const BENCHMARK_SEEDS: [u64; 3] = [1, 2, 3];

#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    /// Keep benchmark runs in memory instead of writing them under the output directory.
    pub quick: bool,
    pub workers: usize,
}

#[derive(Debug, Clone)]
pub struct CriterionResult {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
    pub limit: Option<Duration>,
}

impl CriterionResult {
    fn finish(
        id: usize,
        name: &'static str,
        start: Instant,
        limit: Option<Duration>,
        ok: bool,
        detail: String,
    ) -> Self {
        let elapsed = start.elapsed();
        let in_time = limit.is_none_or(|l| elapsed < l);
        let detail = if in_time {
            detail
        } else {
            format!("{detail}; over time limit")
        };
        CriterionResult {
            id,
            name,
            passed: ok && in_time,
            detail,
            elapsed,
            limit,
        }
    }

    fn failed(id: usize, name: &'static str, start: Instant, err: impl fmt::Display) -> Self {
        Self::finish(id, name, start, None, false, format!("error: {err}"))
    }
}

impl fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "[{status}] {:>2} {}: {} ({:.2}s",
            self.id,
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )?;
        if let Some(l) = self.limit {
            write!(f, ", limit {}s", l.as_secs())?;
        }
        write!(f, ")")
    }
}

fn random_mask<R: Rng>(rng: &mut R, c_max: usize) -> CategoryMask {
    let mut ids: Vec<usize> = (0..c_max).collect();
    ids.shuffle(rng);
    let k = rng.random_range(1..=c_max);
    CategoryMask::new(ids[..k].iter().copied(), c_max).expect("ids below c_max")
}

fn random_params<R: Rng>(rng: &mut R, fd: usize, hidden: usize, c_max: usize, scale: f64) -> ModelParams {
    let mut p = ModelParams::zeros(fd, hidden, c_max);
    for block in p.blocks_mut() {
        for v in block.iter_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
    p
}

/// Analytic gradients against central finite differences on random
/// instances. Relative error per entry is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn gradient_check(instances: usize, seed: u64) -> CriterionResult {
    const NAME: &str = "gradient correctness";
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let fd = rng.random_range(1..=5);
        let hidden = rng.random_range(1..=6);
        let c_max = rng.random_range(2..=6);
        let params = random_params(&mut rng, fd, hidden, c_max, 1.0);
        let mask = random_mask(&mut rng, c_max);
        let batch: Vec<Sample> = (0..rng.random_range(1..=5))
            .map(|i| Sample {
                id: i,
                features: (0..fd).map(|_| rng.random_range(-2.0..2.0)).collect(),
                label: mask.ids()[rng.random_range(0..mask.len())],
            })
            .collect();
        let refs: Vec<&Sample> = batch.iter().collect();
        let analytic = match ce_loss_and_grad(&params, &refs, &mask, false) {
            Ok((_, g)) => g.flatten(),
            Err(e) => return CriterionResult::failed(1, NAME, start, e),
        };
        let mut idx = 0;
        for b in 0..4 {
            let len = params.blocks()[b].len();
            for i in 0..len {
                let mut plus = params.clone();
                plus.blocks_mut()[b][i] += h;
                let mut minus = params.clone();
                minus.blocks_mut()[b][i] -= h;
                let (lp, lm) = match (ce_loss(&plus, &refs, &mask), ce_loss(&minus, &refs, &mask)) {
                    (Ok(a), Ok(b)) => (a, b),
                    (Err(e), _) | (_, Err(e)) => return CriterionResult::failed(1, NAME, start, e),
                };
                let numeric = (lp - lm) / (2.0 * h);
                let a = analytic[idx];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                idx += 1;
            }
        }
    }
    CriterionResult::finish(
        1,
        NAME,
        start,
        Some(Duration::from_secs(10)),
        worst < 1e-4,
        format!("{instances} instances, max relative error {worst:.3e} (< 1e-4)"),
    )
}

/// A random small maintenance problem with both old and new categories.
pub fn random_oracle_instance<R: Rng>(rng: &mut R) -> OracleInstance {
    let c_max = 4;
    let fd = 2;
    let model = random_params(rng, fd, 3, c_max, 2.0);
    let mut ids: Vec<usize> = (0..c_max).collect();
    ids.shuffle(rng);
    let n_cats = rng.random_range(2..=3);
    let mut all: Vec<usize> = ids[..n_cats].to_vec();
    all.sort_unstable();
    let n_old_cats = rng.random_range(1..n_cats);
    let mut old_cats: Vec<usize> = all.clone();
    old_cats.shuffle(rng);
    old_cats.truncate(n_old_cats);
    old_cats.sort_unstable();
    let new_cats: Vec<usize> = all.iter().copied().filter(|c| !old_cats.contains(c)).collect();

    let capacity = rng.random_range(1..=6);
    let mut next_id = rng.random_range(0..1000u64);
    let mut make = |rng: &mut R, label: usize| {
        next_id += rng.random_range(1..5u64);
        Sample {
            id: next_id,
            features: (0..fd).map(|_| rng.random_range(-2.0..2.0)).collect(),
            label,
        }
    };
    let n_old = rng.random_range(1..=capacity);
    let old_samples: Vec<Sample> = (0..n_old)
        .map(|_| {
            let c = old_cats[rng.random_range(0..old_cats.len())];
            make(rng, c)
        })
        .collect();
    let room = 12 - n_old;
    let n_new = rng.random_range(new_cats.len()..=room);
    let mut new_samples: Vec<Sample> = new_cats.iter().map(|&c| make(rng, c)).collect();
    while new_samples.len() < n_new {
        let c = all[rng.random_range(0..all.len())];
        new_samples.push(make(rng, c));
    }
    new_samples.shuffle(rng);
    OracleInstance {
        model,
        capacity,
        old_samples,
        new_samples,
        old_categories: old_cats,
        all_categories: all,
    }
}

/// Runs `maintain` on an oracle instance with a fresh rng seeded by `draw_seed`.
pub fn maintain_instance(inst: &OracleInstance, draw_seed: u64) -> Result<BTreeMap<usize, Vec<u64>>> {
    let c_max = inst.model.c_max();
    let old_mask = CategoryMask::new(inst.old_categories.iter().copied(), c_max)?;
    let all_mask = CategoryMask::new(inst.all_categories.iter().copied(), c_max)?;
    let items = inst
        .old_samples
        .iter()
        .map(|s| ScoredItem {
            sample: s.clone(),
            g_hat: vec![1.0],
            probs: vec![1.0],
            p_true: 1.0,
        })
        .collect();
    let old = Buffer::from_items(inst.capacity, old_mask.clone(), items)?;
    let inputs = MaintenanceInputs {
        old_buffer: &old,
        new_data: &inst.new_samples,
        model: &inst.model,
        old_categories: &old_mask,
        all_categories: &all_mask,
        log_base: LogBase::NATURAL,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
    let buf = maintain(&inputs, SelectionPolicy::KernelTwoStage, &mut rng)?;
    Ok(buf
        .seen()
        .ids()
        .iter()
        .filter(|&&c| !buf.category(c).is_empty())
        .map(|&c| (c, buf.category(c).iter().map(|i| i.sample.id).collect()))
        .collect())
}

pub fn buffer_oracle(instances: usize, seed: u64) -> CriterionResult {
    const NAME: &str = "buffer oracle equivalence";
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for n in 0..instances {
        let inst = random_oracle_instance(&mut rng);
        let draw_seed = seed ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let expected = oracle_maintain(&inst, &mut ChaCha8Rng::seed_from_u64(draw_seed));
        match maintain_instance(&inst, draw_seed) {
            Ok(got) if got == expected => {}
            Ok(_) => mismatches += 1,
            Err(e) => return CriterionResult::failed(2, NAME, start, e),
        }
    }
    CriterionResult::finish(
        2,
        NAME,
        start,
        Some(Duration::from_secs(30)),
        mismatches == 0,
        format!("{instances} instances, {mismatches} mismatches"),
    )
}

pub fn quota_law(pairs: usize, seed: u64) -> CriterionResult {
    const NAME: &str = "quota law";
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    for _ in 0..pairs {
        let m = rng.random_range(0..=500usize);
        let n = rng.random_range(1..=60usize);
        let cats: Vec<usize> = (0..n).map(|i| i * 2 + 1).collect();
        // coarse values force ties; some categories have no candidates
        let mut aidv = BTreeMap::new();
        for &c in &cats {
            if rng.random_bool(0.9) {
                aidv.insert(c, rng.random_range(0..8) as f64 * 0.5);
            }
        }
        let quotas = allocate_quotas(m, &cats, &aidv);
        let (q, r) = (m / n, m % n);
        let in_range = quotas.values().all(|&v| v == q || v == q + 1);
        let extra = quotas.values().filter(|&&v| v == q + 1).count();
        let total: usize = quotas.values().sum();
        // a category with the extra slot never ranks below one without it
        let ordered = quotas.iter().all(|(a, &qa)| {
            quotas.iter().all(|(b, &qb)| {
                if qa > qb {
                    let va = aidv.get(a).copied().unwrap_or(f64::NEG_INFINITY);
                    let vb = aidv.get(b).copied().unwrap_or(f64::NEG_INFINITY);
                    va > vb || (va == vb && a < b)
                } else {
                    true
                }
            })
        });
        if !(in_range && extra == r && total == m && quotas.len() == n && ordered) {
            violations += 1;
        }
    }
    CriterionResult::finish(
        3,
        NAME,
        start,
        Some(Duration::from_secs(1)),
        violations == 0,
        format!("{pairs} (M, |C|) pairs, {violations} violations"),
    )
}

/// First round `t ≥ 3` whose gap fell twice in a row.
fn scan_two_drops(gaps: &[f64]) -> Option<usize> {
    (2..gaps.len())
        .find(|&i| gaps[i] < gaps[i - 1] && gaps[i - 1] < gaps[i - 2])
        .map(|i| i + 1)
}

pub fn switch_replay(sequences: usize, seed: u64) -> CriterionResult {
    const NAME: &str = "switch-rule replay";
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..sequences {
        let len = rng.random_range(0..40);
        let levels = rng.random_range(2..12);
        let gaps: Vec<f64> = (0..len)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let mut s = GapMonitorState::default();
        let mut one_way = true;
        for (i, g) in gaps.iter().enumerate() {
            let was = s.switched;
            s.observe(i + 1, *g, SwitchRule::TwoConsecutive);
            one_way &= !was || s.switched;
        }
        let ok = s.t_switch == scan_two_drops(&gaps) && s.t_switch.is_none_or(|t| t >= 3) && one_way;
        if !ok {
            bad += 1;
        }
    }
    CriterionResult::finish(
        4,
        NAME,
        start,
        Some(Duration::from_secs(1)),
        bad == 0,
        format!("{sequences} sequences, {bad} disagreements"),
    )
}

/// Small configuration used wherever a complete but quick run is needed.
pub fn small_run_config(method: MethodVariant, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        method,
        clients: 3,
        rounds: 8,
        c_max: 8,
        window: 3,
        overlap: 1,
        capacity: 24,
        epochs: 3,
        feature_dim: 4,
        hidden_dim: 8,
        n_per_cat: 20,
        n_test_per_cat: 10,
        seed,
        ..ExperimentConfig::default()
    }
}

pub fn lambda_rule(workers: usize) -> CriterionResult {
    const NAME: &str = "replay weight rule";
    let start = Instant::now();
    let g = [0.3, -1.2, 0.5];
    let doubled: Vec<f64> = g.iter().map(|v| 2.0 * v).collect();
    let mut checks = Vec::new();
    for averaging in [GradAveraging::Vector, GradAveraging::SquaredNorm] {
        let mut equal = ReplayWeightState::new();
        checks.push(equal.lambda == 1.0);
        equal.accumulate_task(&g);
        equal.accumulate_replay(&g);
        checks.push((equal.update_lambda(averaging, 1e-12, 1e3) - 1.0).abs() < 1e-12);
        let mut double = ReplayWeightState::new();
        double.accumulate_task(&g);
        double.accumulate_replay(&doubled);
        checks.push((double.update_lambda(averaging, 1e-12, 1e3) - 4.0).abs() < 1e-12);
    }
    checks.push(lambda_ratio(0.0, 0.0, 1e-12, 1e3) == 0.0);
    let unit_ok = checks.iter().all(|&c| c);

    let cfg = ExperimentConfig {
        workers,
        ..small_run_config(MethodVariant::FedKace, 11)
    };
    let (run_ok, min) = match run_experiment(&cfg) {
        Ok(rec) => {
            let all: Vec<f64> = rec
                .rounds
                .iter()
                .flat_map(|r| r.clients.iter().flat_map(|c| c.lambda_trace.iter().copied()))
                .collect();
            let min = all.iter().copied().fold(f64::INFINITY, f64::min);
            (!all.is_empty() && all.iter().all(|l| l.is_finite() && *l >= 0.0), min)
        }
        Err(e) => return CriterionResult::failed(5, NAME, start, e),
    };
    CriterionResult::finish(
        5,
        NAME,
        start,
        Some(Duration::from_secs(5)),
        unit_ok && run_ok,
        format!(
            "unit cases {}, min λ over a {}-round run {min:.3e}",
            if unit_ok { "ok" } else { "wrong" },
            cfg.rounds
        ),
    )
}

fn schedule_config(c_max: usize, window: usize, overlap: usize, rounds: usize) -> ScheduleConfig {
    ScheduleConfig {
        c_max,
        clients: 3,
        rounds,
        window,
        overlap,
        n_per_cat: 4,
        n_test_per_cat: 2,
        feature_dim: 2,
        noise_sigma: 1.0,
        separation: 1.0,
        seed: 5,
    }
}

pub fn schedule_properties() -> CriterionResult {
    const NAME: &str = "schedule properties";
    let start = Instant::now();
    let mut problems = Vec::new();

    let overlap2 = match DataStream::new(schedule_config(100, 5, 2, 100)) {
        Ok(s) => s,
        Err(e) => return CriterionResult::failed(6, NAME, start, e),
    };
    for k in 0..3 {
        let windows = overlap2.build_schedule(k);
        for t in 1..windows.len() {
            let a: BTreeSet<usize> = windows[t - 1].iter().copied().collect();
            let b: BTreeSet<usize> = windows[t].iter().copied().collect();
            if a.intersection(&b).count() != 2 {
                problems.push(format!("O=2 client {k} rounds {t}/{} overlap != 2", t + 1));
            }
        }
    }

    let overlap5 = match DataStream::new(schedule_config(100, 5, 5, 100)) {
        Ok(s) => s,
        Err(e) => return CriterionResult::failed(6, NAME, start, e),
    };
    for k in 0..3 {
        let windows = overlap5.build_schedule(k);
        for t in 1..windows.len() {
            let same = windows[t] == windows[t - 1];
            // rounds 1-5 share a window, round 6 starts the next block, ...
            if same != (t % 5 != 0) {
                problems.push(format!("O=5 client {k} round {} breaks the 5-round blocks", t + 1));
            }
        }
    }

    let small = match DataStream::new(schedule_config(20, 5, 2, 30)) {
        Ok(s) => s,
        Err(e) => return CriterionResult::failed(6, NAME, start, e),
    };
    let mut ids = BTreeSet::new();
    let mut total = 0;
    for k in 0..3 {
        for (t, w) in small.build_schedule(k).iter().enumerate() {
            let task = small.draw_round_data(k, t + 1, w);
            total += task.samples.len();
            ids.extend(task.samples.iter().map(|s| s.id));
        }
    }
    if ids.len() != total {
        problems.push(format!("{} duplicate sample ids", total - ids.len()));
    }
    let ok = problems.is_empty();
    let detail = if ok {
        format!("O=2 overlap exact, O=5 blocks exact, {total} sample ids distinct")
    } else {
        problems.truncate(3);
        problems.join("; ")
    };
    CriterionResult::finish(6, NAME, start, Some(Duration::from_secs(5)), ok, detail)
}

/// The shared benchmark configuration for the directional comparisons.
pub fn benchmark_config(method: MethodVariant, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        method,
        clients: 5,
        rounds: 30,
        c_max: 20,
        window: 5,
        overlap: 2,
        capacity: 200,
        epochs: 5,
        feature_dim: 16,
        hidden_dim: 32,
        seed,
        ..ExperimentConfig::default()
    }
}

#[derive(Debug, Clone)]
pub struct BenchRun {
    pub seed: u64,
    pub aa: f64,
    pub cond: Option<f64>,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, Default)]
pub struct BenchmarkResults {
    pub runs: BTreeMap<MethodVariant, Vec<BenchRun>>,
}

impl BenchmarkResults {
    pub fn mean_aa(&self, m: MethodVariant) -> Option<f64> {
        let runs = self.runs.get(&m)?;
        (!runs.is_empty()).then(|| runs.iter().map(|r| r.aa).sum::<f64>() / runs.len() as f64)
    }

    pub fn mean_cond(&self, m: MethodVariant) -> Option<f64> {
        let conds: Option<Vec<f64>> = self.runs.get(&m)?.iter().map(|r| r.cond).collect();
        let conds = conds?;
        (!conds.is_empty()).then(|| conds.iter().sum::<f64>() / conds.len() as f64)
    }

    pub fn elapsed(&self, methods: &[MethodVariant]) -> Duration {
        methods
            .iter()
            .filter_map(|m| self.runs.get(m))
            .flatten()
            .map(|r| r.elapsed)
            .sum()
    }
}

/// Runs every method in `methods` on the benchmark for each seed. With
/// `out`, each run's `rounds.csv` and `summary.json` land in `out/<run id>`.
pub fn run_benchmark(methods: &[MethodVariant], workers: usize, out: Option<&Path>) -> Result<BenchmarkResults> {
    let mut results = BenchmarkResults::default();
    for &m in methods {
        for seed in BENCHMARK_SEEDS {
            let cfg = ExperimentConfig {
                workers,
                ..benchmark_config(m, seed)
            };
            let start = Instant::now();
            let record = run_experiment(&cfg)?;
            let elapsed = start.elapsed();
            let summary = summarize(&record, &cfg);
            if let Some(dir) = out {
                write_outputs(&dir.join(&summary.run_id), &record.rounds, &summary)?;
            }
            results.runs.entry(m).or_default().push(BenchRun {
                seed,
                aa: summary.aa.unwrap_or(0.0),
                cond: summary.cond_window_mean,
                elapsed,
            });
        }
    }
    Ok(results)
}

pub const DIRECTIONAL_METHODS: [MethodVariant; 3] =
    [MethodVariant::FedKace, MethodVariant::LocalKace, MethodVariant::FedAvg];

fn aa_table(results: &BenchmarkResults, methods: &[MethodVariant]) -> String {
    methods
        .iter()
        .map(|&m| match results.mean_aa(m) {
            Some(v) => format!("{m} {v:.4}"),
            None => format!("{m} missing"),
        })
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn directional(results: &BenchmarkResults) -> CriterionResult {
    let start = Instant::now();
    let fk = results.mean_aa(MethodVariant::FedKace);
    let lkc = results.mean_aa(MethodVariant::LocalKace);
    let avg = results.mean_aa(MethodVariant::FedAvg);
    let ok = matches!((fk, lkc, avg), (Some(f), Some(l), Some(a)) if f > l && f > a);
    let took = results.elapsed(&DIRECTIONAL_METHODS);
    let limit = Duration::from_secs(300);
    let mut r = CriterionResult::finish(
        7,
        "global beats local and no-buffer",
        start,
        None,
        ok && took < limit,
        format!("mean AA {}", aa_table(results, &DIRECTIONAL_METHODS)),
    );
    r.elapsed = took;
    r.limit = Some(limit);
    r
}

pub fn buffer_quality(results: &BenchmarkResults) -> CriterionResult {
    let start = Instant::now();
    let fk = results.mean_cond(MethodVariant::FedKace);
    let rnd = results.mean_cond(MethodVariant::As6);
    let ok = matches!((fk, rnd), (Some(f), Some(r)) if f <= r);
    let show = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "missing".into());
    let mut r = CriterionResult::finish(
        8,
        "buffer condition number vs random buffer",
        start,
        None,
        ok,
        format!("windowed mean cond fedkace {} vs as6 {}", show(fk), show(rnd)),
    );
    r.elapsed = results.elapsed(&[MethodVariant::FedKace, MethodVariant::As6]);
    r
}

pub fn federated_methods() -> Vec<MethodVariant> {
    MethodVariant::ALL
        .into_iter()
        .filter(|m| *m != MethodVariant::Centralized)
        .collect()
}

pub fn upper_bound(results: &BenchmarkResults) -> CriterionResult {
    let start = Instant::now();
    let central = results.mean_aa(MethodVariant::Centralized);
    let fed = federated_methods();
    let best = fed
        .iter()
        .filter_map(|&m| results.mean_aa(m).map(|v| (m, v)))
        .max_by(|a, b| a.1.total_cmp(&b.1));
    let complete = fed.iter().all(|&m| results.mean_aa(m).is_some());
    let ok = complete && matches!((central, best), (Some(c), Some((_, b))) if c >= b);
    let detail = match (central, best) {
        (Some(c), Some((m, b))) => format!("centralized {c:.4} vs best federated {m} {b:.4}"),
        _ => "missing runs".to_string(),
    };
    let mut r = CriterionResult::finish(9, "centralized upper bound", start, None, ok, detail);
    r.elapsed = results.elapsed(&MethodVariant::ALL);
    r
}

fn scratch_dir(tag: &str) -> PathBuf {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    std::env::temp_dir().join(format!("fedkace-{tag}-{}-{nanos}", std::process::id()))
}

/// Runs the benchmark FedKACE configuration (with its Centralized pairing)
/// twice into the same directory and compares the files byte for byte.
pub fn determinism(workers: usize) -> CriterionResult {
    const NAME: &str = "byte-identical reruns";
    let start = Instant::now();
    let root = scratch_dir("determinism");
    let mut outputs = Vec::new();
    let cfg = ExperimentConfig {
        workers,
        output: root.clone(),
        ..benchmark_config(MethodVariant::FedKace, 1)
    };
    for _ in 0..2 {
        match execute(&cfg, RunOptions::default()) {
            Ok((_, dir)) => {
                let read = |f: &str| std::fs::read(dir.join(f));
                match (read("rounds.csv"), read("summary.json")) {
                    (Ok(csv), Ok(json)) => outputs.push((csv, json)),
                    (Err(e), _) | (_, Err(e)) => return CriterionResult::failed(10, NAME, start, e),
                }
            }
            Err(e) => return CriterionResult::failed(10, NAME, start, e),
        }
    }
    let _ = std::fs::remove_dir_all(&root);
    let csv_same = outputs[0].0 == outputs[1].0;
    let json_same = outputs[0].1 == outputs[1].1;
    CriterionResult::finish(
        10,
        NAME,
        start,
        Some(Duration::from_secs(60)),
        csv_same && json_same,
        format!(
            "rounds.csv {} ({} bytes), summary.json {}",
            if csv_same { "identical" } else { "differs" },
            outputs[0].0.len(),
            if json_same { "identical" } else { "differs" }
        ),
    )
}

/// Runs every criterion in order.
pub fn run_suite(opts: &SuiteOptions) -> Vec<CriterionResult> {
    let mut out = vec![
        gradient_check(50, 1),
        buffer_oracle(600, 2),
        quota_law(200, 3),
        switch_replay(1000, 4),
        lambda_rule(opts.workers),
        schedule_properties(),
    ];
    let dir = (!opts.quick).then(|| {
        std::env::var_os(OUTPUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join("benchmark")
    });
    let start = Instant::now();
    match run_benchmark(&MethodVariant::ALL, opts.workers, dir.as_deref()) {
        Ok(results) => {
            out.push(directional(&results));
            out.push(buffer_quality(&results));
            out.push(upper_bound(&results));
        }
        Err(e) => {
            out.push(CriterionResult::failed(
                7,
                "global beats local and no-buffer",
                start,
                &e,
            ));
            out.push(CriterionResult::failed(
                8,
                "buffer condition number vs random buffer",
                start,
                &e,
            ));
            out.push(CriterionResult::failed(9, "centralized upper bound", start, &e));
        }
    }
    out.push(determinism(opts.workers));
    out
}
