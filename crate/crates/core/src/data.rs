//! Synthetic streaming environment: per-client cyclic category schedules,
//! fresh per-round training samples and fixed test sets.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::fmt_real;
use crate::rng::{stream_rng, Stream};

/// Test sample ids live at and above this value; training ids stay below it.
pub const TEST_ID_BASE: u64 = 1 << 62;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundTask {
    pub client: usize,
    pub round: usize,
    pub categories: Vec<usize>,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub c_max: usize,
    pub clients: usize,
    pub rounds: usize,
    pub window: usize,
    pub overlap: usize,
    pub n_per_cat: usize,
    pub n_test_per_cat: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// Scale applied to category means drawn from `[-1, 1]^feature_dim`.
    pub separation: f64,
    pub seed: u64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_max == 0 {
            return Err(FedError::config("c_max", "must be at least 1"));
        }
        if self.clients == 0 {
            return Err(FedError::config("clients", "must be at least 1"));
        }
        if self.window == 0 || self.window > self.c_max {
            return Err(FedError::config("window", "must satisfy 1 <= window <= c_max"));
        }
        if self.overlap > self.window {
            return Err(FedError::config("overlap", "must satisfy overlap <= window"));
        }
        if self.feature_dim == 0 {
            return Err(FedError::config("feature_dim", "must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(FedError::config("noise_sigma", "must be finite and non-negative"));
        }
        if !(self.separation.is_finite()) {
            return Err(FedError::config("separation", "must be finite"));
        }
        let train_ids = (self.clients as u128)
            * (self.rounds.max(1) as u128)
            * (self.c_max as u128)
            * (self.n_per_cat.max(1) as u128);
        if train_ids >= TEST_ID_BASE as u128 {
            return Err(FedError::config("n_per_cat", "run too large for the sample id space"));
        }
        Ok(())
    }
}

/// Deterministic generator for one run; category means are fixed at construction.
#[derive(Debug, Clone)]
pub struct DataStream {
    cfg: ScheduleConfig,
    means: Vec<Vec<f64>>,
}

impl DataStream {
    pub fn new(cfg: ScheduleConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(cfg.seed, Stream::CategoryMeans, [0, 0, 0]);
        let means = (0..cfg.c_max)
            .map(|_| {
                (0..cfg.feature_dim)
                    .map(|_| rng.random_range(-1.0..=1.0) * cfg.separation)
                    .collect()
            })
            .collect();
        Ok(DataStream { cfg, means })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.cfg
    }

    pub fn category_mean(&self, c: usize) -> &[f64] {
        &self.means[c]
    }

    /// The client's seeded cyclic permutation of all categories.
    pub fn permutation(&self, client: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.cfg.c_max).collect();
        let mut rng = stream_rng(self.cfg.seed, Stream::Permutation, [client as u64, 0, 0]);
        perm.shuffle(&mut rng);
        perm
    }

    /// Category windows for rounds `1..=T` of one client.
    pub fn build_schedule(&self, client: usize) -> Vec<Vec<usize>> {
        windows_over(
            &self.permutation(client),
            self.cfg.window,
            self.cfg.overlap,
            self.cfg.rounds,
        )
    }

    pub fn draw_round_data(&self, client: usize, round: usize, window: &[usize]) -> RoundTask {
        let n = self.cfg.n_per_cat;
        let mut samples = Vec::with_capacity(window.len() * n);
        for &c in window {
            let mut rng = stream_rng(
                self.cfg.seed,
                Stream::TrainData,
                [client as u64, round as u64, c as u64],
            );
            let base = (((client as u64) * (self.cfg.rounds.max(1) as u64) + (round as u64 - 1))
                * (self.cfg.c_max as u64)
                + c as u64)
                * n as u64;
            for i in 0..n {
                samples.push(Sample {
                    id: base + i as u64,
                    features: self.noisy(c, &mut rng),
                    label: c,
                });
            }
        }
        RoundTask {
            client,
            round,
            categories: window.to_vec(),
            samples,
        }
    }

    /// The run-constant test samples of the requested categories, ascending by category.
    pub fn test_set(&self, categories: &BTreeSet<usize>) -> Vec<Sample> {
        let n = self.cfg.n_test_per_cat;
        let mut out = Vec::with_capacity(categories.len() * n);
        for &c in categories {
            let mut rng = stream_rng(self.cfg.seed, Stream::TestData, [c as u64, 0, 0]);
            for i in 0..n {
                out.push(Sample {
                    id: TEST_ID_BASE + (c * n + i) as u64,
                    features: self.noisy(c, &mut rng),
                    label: c,
                });
            }
        }
        out
    }

    fn noisy<R: Rng>(&self, c: usize, rng: &mut R) -> Vec<f64> {
        let sigma = self.cfg.noise_sigma;
        let mean = &self.means[c];
        if sigma == 0.0 {
            return mean.clone();
        }
        let normal = Normal::new(0.0, sigma).expect("validated sigma");
        mean.iter().map(|m| m + normal.sample(rng)).collect()
    }
}

/// Sliding windows over a cyclic list: stride `w - O` per round, or for
/// `O == w` the same window for `w` rounds before advancing by `w`.
pub fn windows_over(perm: &[usize], window: usize, overlap: usize, rounds: usize) -> Vec<Vec<usize>> {
    let c = perm.len();
    (1..=rounds)
        .map(|t| {
            let start = if overlap < window {
                (t - 1) * (window - overlap)
            } else {
                ((t - 1) / window) * window
            };
            (0..window).map(|i| perm[(start + i) % c]).collect()
        })
        .collect()
}

/// Writes one client's training stream as `id,round,label,feat0,...` lines.
pub fn dump_client_data(path: &Path, tasks: &[RoundTask]) -> Result<()> {
    let file = File::create(path).map_err(|e| FedError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let fd = tasks
        .iter()
        .flat_map(|t| t.samples.first())
        .map(|s| s.features.len())
        .next()
        .unwrap_or(0);
    let mut header = String::from("id,round,label");
    for j in 0..fd {
        header.push_str(&format!(",feat{j}"));
    }
    let io = |e| FedError::io(path, e);
    writeln!(w, "{header}").map_err(io)?;
    for t in tasks {
        for s in &t.samples {
            let mut line = format!("{},{},{}", s.id, t.round, s.label);
            for v in &s.features {
                line.push(',');
                line.push_str(&fmt_real(*v));
            }
            writeln!(w, "{line}").map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads a file written by [`dump_client_data`] back as `(round, sample)` pairs.
pub fn load_client_data(path: &Path) -> Result<Vec<(usize, Sample)>> {
    let file = File::open(path).map_err(|e| FedError::io(path, e))?;
    let bad = |line: usize, what: &str| {
        FedError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {line}: {what}")),
        )
    };
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| FedError::io(path, e))?;
        if n == 0 || line.is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let id = cols
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(n + 1, "id"))?;
        let round = cols
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(n + 1, "round"))?;
        let label = cols
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(n + 1, "label"))?;
        let features = cols
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad(n + 1, "feature"))?;
        out.push((round, Sample { id, features, label }));
    }
    Ok(out)
}
