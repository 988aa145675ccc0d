//! Kernel spectral boundary buffer.
//!
//! After local training every candidate in `old buffer ∪ new round data` is
//! embedded by its unit-normalised masked logits `ĝ(x)`. A Gaussian kernel on
//! those embeddings drives three scores per candidate:
//!
//! * `DS`, the squared distance to the nearest item of the old buffer,
//! * `IDV`, the surprisal of the kernel-smoothed label estimate plus a
//!   diversity bonus,
//! * `CDV`, how much adding the candidate would move that estimate towards
//!   the model's own prediction, plus a smaller diversity bonus.
//!
//! Capacity is split evenly over the seen categories with the remainder going
//! to the categories with the highest mean IDV. Old categories keep the top
//! CDV items among their top IDV items; new categories are filled by
//! sampling without replacement proportionally to `exp(IDV)`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{FedError, Result};
use crate::model::{forward, CategoryMask, ModelParams, PROB_FLOOR};

/// Below this logit norm the embedding falls back to the first basis vector.
pub const ZERO_LOGIT_NORM: f64 = 1e-12;
/// Smallest eigenvalue used in the condition number denominator.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Column layout of [`Buffer::dump_lines`]; `ids` is space separated.
pub const DUMP_HEADER: &str = "round,client,category,ids";

/// A sample together with its embedding under the current local model.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredItem {
    pub sample: Sample,
    /// Unit-norm logits over the seen categories, ascending category id.
    pub g_hat: Vec<f64>,
    /// Masked softmax over the seen categories, same ordering as `g_hat`.
    pub probs: Vec<f64>,
    /// Probability of the sample's own label.
    pub p_true: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    capacity: usize,
    seen: CategoryMask,
    per_category: BTreeMap<usize, Vec<ScoredItem>>,
    quotas: BTreeMap<usize, usize>,
}

impl Buffer {
    pub fn new(capacity: usize, c_max: usize) -> Self {
        Buffer {
            capacity,
            seen: CategoryMask::empty(c_max),
            per_category: BTreeMap::new(),
            quotas: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn seen(&self) -> &CategoryMask {
        &self.seen
    }

    pub fn len(&self) -> usize {
        self.per_category.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn quota(&self, c: usize) -> Option<usize> {
        self.quotas.get(&c).copied()
    }

    pub fn category(&self, c: usize) -> &[ScoredItem] {
        self.per_category.get(&c).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Items in ascending category order, ascending sample id within a category.
    pub fn items(&self) -> impl Iterator<Item = &ScoredItem> {
        self.per_category.values().flatten()
    }

    pub fn samples(&self) -> Vec<&Sample> {
        self.items().map(|i| &i.sample).collect()
    }

    /// One line per stored category, matching [`DUMP_HEADER`].
    pub fn dump_lines(&self, round: usize, client: usize) -> Vec<String> {
        self.per_category
            .iter()
            .map(|(c, items)| {
                let ids: Vec<String> = items.iter().map(|i| i.sample.id.to_string()).collect();
                format!("{round},{client},{c},{}", ids.join(" "))
            })
            .collect()
    }

    /// Checks the capacity, membership and quota invariants.
    pub fn check_invariants(&self) -> Result<()> {
        if self.len() > self.capacity {
            return Err(FedError::BufferCorruption(format!(
                "{} items exceed capacity {}",
                self.len(),
                self.capacity
            )));
        }
        for (c, items) in &self.per_category {
            if !self.seen.contains(*c) {
                return Err(FedError::BufferCorruption(format!("category {c} was never seen")));
            }
            if items.iter().any(|i| i.sample.label != *c) {
                return Err(FedError::BufferCorruption(format!(
                    "mislabelled item under category {c}"
                )));
            }
            if items.len() > self.quotas.get(c).copied().unwrap_or(0) {
                return Err(FedError::BufferCorruption(format!("category {c} exceeds its quota")));
            }
        }
        Ok(())
    }

    /// Builds a buffer directly from items; used by replay tests and tooling.
    pub fn from_items(capacity: usize, seen: CategoryMask, items: Vec<ScoredItem>) -> Result<Self> {
        let mut per_category: BTreeMap<usize, Vec<ScoredItem>> = BTreeMap::new();
        for item in items {
            per_category.entry(item.sample.label).or_default().push(item);
        }
        for v in per_category.values_mut() {
            v.sort_by_key(|i| i.sample.id);
        }
        let quotas = per_category.iter().map(|(c, v)| (*c, v.len())).collect();
        let buf = Buffer {
            capacity,
            seen,
            per_category,
            quotas,
        };
        buf.check_invariants()?;
        Ok(buf)
    }
}

/// `|old|^(2/d)` for a non-empty old buffer, otherwise 1.
pub fn compute_beta(old_buffer_size: usize, d: usize) -> f64 {
    if old_buffer_size == 0 || d == 0 {
        1.0
    } else {
        (old_buffer_size as f64).powf(2.0 / d as f64)
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn kernel(g1: &[f64], g2: &[f64], beta: f64) -> f64 {
    (-beta * squared_distance(g1, g2)).exp()
}

/// Embeds samples under `model` restricted to `seen`.
pub fn score_samples(model: &ModelParams, samples: &[&Sample], seen: &CategoryMask) -> Result<Vec<ScoredItem>> {
    if seen.is_empty() {
        return Err(FedError::InvalidMask("no seen categories to embed over".into()));
    }
    samples
        .iter()
        .map(|s| {
            let rank = seen
                .rank_of(s.label)
                .ok_or_else(|| FedError::BufferCorruption(format!("sample {} label {} not seen", s.id, s.label)))?;
            let logits = forward(model, &s.features)?;
            let masked: Vec<f64> = seen.ids().iter().map(|&c| logits[c]).collect();
            let norm = masked.iter().map(|v| v * v).sum::<f64>().sqrt();
            let g_hat = if norm < ZERO_LOGIT_NORM {
                let mut e = vec![0.0; masked.len()];
                e[0] = 1.0;
                e
            } else {
                masked.iter().map(|v| v / norm).collect()
            };
            let max = masked.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = masked.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
            Ok(ScoredItem {
                sample: (*s).clone(),
                p_true: probs[rank],
                g_hat,
                probs,
            })
        })
        .collect()
}

/// Minimum squared embedding distance to the old buffer; 0 when it is empty.
pub fn ds_score(g_hat: &[f64], old: &[ScoredItem]) -> f64 {
    old.iter()
        .map(|o| squared_distance(g_hat, &o.g_hat))
        .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |a| a.min(d))))
        .unwrap_or(0.0)
}

/// Kernel-smoothed probability of the item's label before and after adding it.
///
/// `label_rank` is the position of the item's label in the embedding order.
/// Falls back to `(p, p)` for an empty old buffer or when every kernel weight
/// underflows.
pub fn conditional_predictives(item: &ScoredItem, label_rank: usize, old: &[ScoredItem], beta: f64) -> (f64, f64) {
    let p = item.p_true;
    let weights: Vec<f64> = old.iter().map(|o| kernel(&item.g_hat, &o.g_hat, beta)).collect();
    let b: f64 = weights.iter().sum();
    if old.is_empty() || b <= f64::MIN_POSITIVE {
        return (p, p);
    }
    // normalised weights keep a single-item estimate exactly equal to its probability
    let (mut before, mut a) = (0.0, 0.0);
    for (k, o) in weights.iter().zip(old) {
        before += (k / b) * o.probs[label_rank];
        a += k * o.probs[label_rank];
    }
    (before, (a + p) / (b + 1.0))
}

/// Base of the logarithms in IDV, CDV and the adaptive factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogBase(pub f64);

impl LogBase {
    pub const NATURAL: LogBase = LogBase(std::f64::consts::E);

    pub fn log(&self, x: f64) -> f64 {
        if self.0 == std::f64::consts::E {
            x.ln()
        } else {
            x.ln() / self.0.ln()
        }
    }
}

impl Default for LogBase {
    fn default() -> Self {
        LogBase::NATURAL
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveFactors {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl AdaptiveFactors {
    /// `log|M| / sqrt|M|` and `1 / sqrt|M|`, both zero for an empty buffer.
    pub fn for_buffer_size(n: usize, base: LogBase) -> Self {
        if n == 0 {
            return AdaptiveFactors {
                lambda1: 0.0,
                lambda2: 0.0,
            };
        }
        let n = n as f64;
        AdaptiveFactors {
            lambda1: base.log(n) / n.sqrt(),
            lambda2: 1.0 / n.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItemScores {
    pub ds: f64,
    pub idv: f64,
    pub cdv: f64,
}

/// DS, IDV and CDV of one candidate against the old buffer.
///
/// `old_category` selects the kernel rule; new categories (and an empty old
/// buffer) use the model probability directly and get a CDV of zero.
pub fn score_item(
    item: &ScoredItem,
    label_rank: usize,
    old: &[ScoredItem],
    beta: f64,
    old_category: bool,
    base: LogBase,
) -> ItemScores {
    let ds = ds_score(&item.g_hat, old);
    let ctx = ScoreContext { old, beta, base };
    ItemScores {
        ds,
        idv: idv(item, label_rank, &ctx, old_category, ds),
        cdv: cdv(item, label_rank, &ctx, old_category, ds),
    }
}

/// The old buffer and kernel settings a candidate is scored against.
#[derive(Debug, Clone, Copy)]
pub struct ScoreContext<'a> {
    pub old: &'a [ScoredItem],
    pub beta: f64,
    pub base: LogBase,
}

pub fn idv(item: &ScoredItem, label_rank: usize, ctx: &ScoreContext<'_>, old_category: bool, ds: f64) -> f64 {
    let ScoreContext { old, beta, base } = *ctx;
    let f = AdaptiveFactors::for_buffer_size(old.len(), base);
    let p = if old_category && !old.is_empty() {
        conditional_predictives(item, label_rank, old, beta).0
    } else {
        item.p_true
    };
    -base.log(p.max(PROB_FLOOR)) + f.lambda1 * ds
}

pub fn cdv(item: &ScoredItem, label_rank: usize, ctx: &ScoreContext<'_>, old_category: bool, ds: f64) -> f64 {
    let ScoreContext { old, beta, base } = *ctx;
    if !old_category || old.is_empty() {
        return 0.0;
    }
    let f = AdaptiveFactors::for_buffer_size(old.len(), base);
    let (_, after) = conditional_predictives(item, label_rank, old, beta);
    base.log(item.p_true.max(PROB_FLOOR) / after.max(PROB_FLOOR)) + f.lambda2 * ds
}

/// Splits `capacity` into `Q = M / |C|` per category plus one extra slot for
/// the `R = M mod |C|` categories with the highest AIDV (ties: lower id first).
/// Categories missing from `aidv` rank last.
pub fn allocate_quotas(capacity: usize, categories: &[usize], aidv: &BTreeMap<usize, f64>) -> BTreeMap<usize, usize> {
    if categories.is_empty() {
        return BTreeMap::new();
    }
    let q = capacity / categories.len();
    let r = capacity % categories.len();
    let mut ranked: Vec<(usize, f64)> = categories
        .iter()
        .map(|&c| (c, aidv.get(&c).copied().unwrap_or(f64::NEG_INFINITY)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
        .iter()
        .enumerate()
        .map(|(i, (c, _))| (*c, if i < r { q + 1 } else { q }))
        .collect()
}

/// A scored candidate for one category's selection.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub item: ScoredItem,
    pub scores: ItemScores,
}

fn top_by(cands: &[&Candidate], k: usize, key: impl Fn(&Candidate) -> f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| {
        key(cands[b])
            .total_cmp(&key(cands[a]))
            .then(cands[a].item.sample.id.cmp(&cands[b].item.sample.id))
    });
    order.truncate(k);
    order
}

/// Two-stage screening for a previously seen category: keep the top `2q` by
/// IDV, then the top `q` of those by CDV. Returns indices into `candidates`.
pub fn select_old_category(candidates: &[Candidate], quota: usize) -> Vec<usize> {
    let all: Vec<&Candidate> = candidates.iter().collect();
    let stage1 = top_by(&all, (2 * quota).min(candidates.len()), |c| c.scores.idv);
    let shortlisted: Vec<&Candidate> = stage1.iter().map(|&i| all[i]).collect();
    let stage2 = top_by(&shortlisted, quota.min(shortlisted.len()), |c| c.scores.cdv);
    let mut picked: Vec<usize> = stage2.into_iter().map(|i| stage1[i]).collect();
    picked.sort_unstable();
    picked
}

/// Sequential draws without replacement, each proportional to `exp(IDV)` over
/// the remaining candidates. IDVs are shifted by their maximum once before
/// exponentiation. Returns indices in draw order.
pub fn select_new_category<R: Rng + ?Sized>(candidates: &[Candidate], quota: usize, rng: &mut R) -> Vec<usize> {
    let n = candidates.len();
    if quota >= n {
        return (0..n).collect();
    }
    let max = candidates
        .iter()
        .map(|c| c.scores.idv)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = candidates.iter().map(|c| (c.scores.idv - max).exp()).collect();
    weighted_draws(&weights, quota, rng)
}

pub(crate) fn weighted_draws<R: Rng + ?Sized>(weights: &[f64], k: usize, rng: &mut R) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..weights.len()).collect();
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k.min(weights.len()) {
        let total: f64 = remaining.iter().map(|&i| weights[i]).sum();
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pos = remaining.len() - 1;
        for (j, &i) in remaining.iter().enumerate() {
            acc += weights[i];
            if u < acc {
                pos = j;
                break;
            }
        }
        picked.push(remaining.remove(pos));
    }
    picked
}

/// Uniform sampling without replacement; used by the random-buffer ablations.
pub fn select_uniform<R: Rng + ?Sized>(n: usize, quota: usize, rng: &mut R) -> Vec<usize> {
    if quota >= n {
        return (0..n).collect();
    }
    let mut v = index::sample(rng, n, quota).into_vec();
    v.sort_unstable();
    v
}

/// How each category's slots are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    /// Two-stage IDV/CDV screening for old categories, IDV-weighted sampling for new ones.
    KernelTwoStage,
    /// IDV-weighted sampling for every category.
    IdvSampling,
    /// Uniform sampling per category.
    BalancedRandom,
}

pub struct MaintenanceInputs<'a> {
    pub old_buffer: &'a Buffer,
    pub new_data: &'a [Sample],
    /// The post-training local model.
    pub model: &'a ModelParams,
    pub old_categories: &'a CategoryMask,
    pub all_categories: &'a CategoryMask,
    pub log_base: LogBase,
}

/// Rebuilds the buffer from `old buffer ∪ new data`.
pub fn maintain<R: Rng + ?Sized>(
    inputs: &MaintenanceInputs<'_>,
    policy: SelectionPolicy,
    rng: &mut R,
) -> Result<Buffer> {
    let MaintenanceInputs {
        old_buffer,
        new_data,
        model,
        old_categories,
        all_categories,
        log_base,
    } = *inputs;
    if all_categories.is_empty() {
        return Err(FedError::InvalidMask("no categories to maintain".into()));
    }
    if !old_categories.is_subset(all_categories) {
        return Err(FedError::Contract(
            "old categories must be a subset of all categories".into(),
        ));
    }
    for item in old_buffer.items() {
        if !old_categories.contains(item.sample.label) {
            return Err(FedError::BufferCorruption(format!(
                "buffered sample {} has label {} outside the historical categories",
                item.sample.id, item.sample.label
            )));
        }
    }

    let pool: Vec<&Sample> = old_buffer.samples().into_iter().chain(new_data.iter()).collect();
    let scored = score_samples(model, &pool, all_categories)?;
    let old_refs = &scored[..old_buffer.len()];
    let beta = compute_beta(old_refs.len(), all_categories.len());

    let mut by_category: BTreeMap<usize, Vec<Candidate>> =
        all_categories.ids().iter().map(|&c| (c, Vec::new())).collect();
    for item in &scored {
        let label = item.sample.label;
        let rank = all_categories.rank_of(label).expect("scored labels are in the mask");
        let scores = score_item(item, rank, old_refs, beta, old_categories.contains(label), log_base);
        by_category.get_mut(&label).expect("category present").push(Candidate {
            item: item.clone(),
            scores,
        });
    }
    for v in by_category.values_mut() {
        v.sort_by_key(|c| c.item.sample.id);
    }

    let aidv: BTreeMap<usize, f64> = by_category
        .iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(c, v)| (*c, v.iter().map(|x| x.scores.idv).sum::<f64>() / v.len() as f64))
        .collect();
    let quotas = allocate_quotas(old_buffer.capacity(), all_categories.ids(), &aidv);

    let mut per_category = BTreeMap::new();
    for (&c, cands) in &by_category {
        let q = quotas[&c];
        let picked = match policy {
            SelectionPolicy::KernelTwoStage if old_categories.contains(c) => select_old_category(cands, q),
            SelectionPolicy::KernelTwoStage | SelectionPolicy::IdvSampling => select_new_category(cands, q, rng),
            SelectionPolicy::BalancedRandom => select_uniform(cands.len(), q, rng),
        };
        let mut items: Vec<ScoredItem> = picked.into_iter().map(|i| cands[i].item.clone()).collect();
        items.sort_by_key(|i| i.sample.id);
        if !items.is_empty() {
            per_category.insert(c, items);
        }
    }

    let buffer = Buffer {
        capacity: old_buffer.capacity(),
        seen: all_categories.clone(),
        per_category,
        quotas,
    };
    debug_assert!(buffer.check_invariants().is_ok());
    Ok(buffer)
}

/// Symmetric Gram matrix of the buffer embeddings.
pub fn gram_matrix(buffer: &Buffer, beta: f64) -> DMatrix<f64> {
    let items: Vec<&ScoredItem> = buffer.items().collect();
    let n = items.len();
    let mut g = DMatrix::identity(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let k = kernel(&items[i].g_hat, &items[j].g_hat, beta);
            g[(i, j)] = k;
            g[(j, i)] = k;
        }
    }
    g
}

/// `λ_max / max(λ_min, 1e-12)` of the Gram matrix; `None` for an empty buffer.
pub fn condition_number(buffer: &Buffer, beta: f64) -> Option<f64> {
    if buffer.is_empty() {
        return None;
    }
    let eig = SymmetricEigen::new(gram_matrix(buffer, beta)).eigenvalues;
    let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    Some(max / min.max(EIGEN_FLOOR))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn item(id: u64, label: usize, g_hat: Vec<f64>, probs: Vec<f64>, p_true: f64) -> ScoredItem {
        ScoredItem {
            sample: Sample {
                id,
                features: vec![0.0],
                label,
            },
            g_hat,
            probs,
            p_true,
        }
    }

    fn cand(id: u64, idv: f64, cdv: f64) -> Candidate {
        Candidate {
            item: item(id, 0, vec![1.0], vec![1.0], 1.0),
            scores: ItemScores { ds: 0.0, idv, cdv },
        }
    }

    #[test]
    fn beta_cases() {
        assert_eq!(compute_beta(0, 4), 1.0);
        assert!((compute_beta(100, 4) - 10.0).abs() < 1e-12);
        assert!((compute_beta(8, 2) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_cases() {
        let a = [0.6, 0.8];
        assert_eq!(kernel(&a, &a, 3.0), 1.0);
        // |(1,0)-(0,1)|^2 = 2, beta = ln2/2 gives exp(-ln 2)
        let k = kernel(&[1.0, 0.0], &[0.0, 1.0], std::f64::consts::LN_2 / 2.0);
        assert!((k - 0.5).abs() < 1e-15);
        let b = [0.0, 1.0];
        assert_eq!(kernel(&a, &b, 1.7), kernel(&b, &a, 1.7));
    }

    #[test]
    fn ds_cases() {
        assert_eq!(ds_score(&[0.6, 0.8], &[]), 0.0);
        let old = vec![
            item(0, 0, vec![1.0, 0.0], vec![0.5, 0.5], 0.5),
            item(1, 1, vec![0.0, 1.0], vec![0.5, 0.5], 0.5),
        ];
        assert_eq!(ds_score(&[0.0, 1.0], &old), 0.0);
        assert!((ds_score(&[0.6, 0.8], &old) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn predictive_cases() {
        let x = item(9, 0, vec![1.0, 0.0], vec![0.7, 0.3], 0.7);
        assert_eq!(conditional_predictives(&x, 0, &[], 1.0), (0.7, 0.7));

        let one = vec![item(0, 0, vec![0.0, 1.0], vec![0.35, 0.65], 0.35)];
        let (before, after) = conditional_predictives(&x, 0, &one, 0.8);
        assert!((before - 0.35).abs() < 1e-15);
        let k = kernel(&x.g_hat, &one[0].g_hat, 0.8);
        assert!((after - (k * 0.35 + 0.7) / (k + 1.0)).abs() < 1e-15);

        // both references equidistant from x
        let two = vec![
            item(0, 0, vec![0.0, 1.0], vec![0.2, 0.8], 0.2),
            item(1, 0, vec![0.0, -1.0], vec![0.6, 0.4], 0.6),
        ];
        let (before, _) = conditional_predictives(&x, 0, &two, 1.0);
        assert!((before - 0.4).abs() < 1e-15);

        // kernel weights underflow: treated like an empty buffer
        let (b, a) = conditional_predictives(&x, 0, &one, 1e6);
        assert_eq!((b, a), (0.7, 0.7));
    }

    #[test]
    fn idv_cdv_cases() {
        let ln = LogBase::NATURAL;
        let x = item(0, 0, vec![1.0], vec![1.0], (-1.0f64).exp());
        let empty = ScoreContext {
            old: &[],
            beta: 1.0,
            base: ln,
        };
        assert!((idv(&x, 0, &empty, true, 0.0) - 1.0).abs() < 1e-15);
        assert_eq!(cdv(&x, 0, &empty, true, 0.0), 0.0);
        let one = [x.clone()];
        let ctx = ScoreContext {
            old: &one,
            beta: 1.0,
            base: ln,
        };
        assert_eq!(cdv(&x, 0, &ctx, false, 0.3), 0.0);
        // new category: model probability, lambda1 = 0 for |M| = 1
        assert!((idv(&x, 0, &ctx, false, 0.3) - 1.0).abs() < 1e-15);

        let f = AdaptiveFactors::for_buffer_size(1, ln);
        assert_eq!((f.lambda1, f.lambda2), (0.0, 1.0));
        let f = AdaptiveFactors::for_buffer_size(100, LogBase(10.0));
        assert!((f.lambda1 - 0.2).abs() < 1e-15);
        let f = AdaptiveFactors::for_buffer_size(100, ln);
        assert!((f.lambda1 - 0.460_517_018_598_809_1).abs() < 1e-15);
        assert!((f.lambda2 - 0.1).abs() < 1e-15);
    }

    #[test]
    fn quota_cases() {
        let aidv: BTreeMap<usize, f64> = [(0, 3.0), (1, 2.0), (2, 1.0)].into();
        let q = allocate_quotas(10, &[0, 1, 2], &aidv);
        assert_eq!(q, [(0, 4), (1, 3), (2, 3)].into());
        let q = allocate_quotas(9, &[0, 1, 2], &aidv);
        assert_eq!(q, [(0, 3), (1, 3), (2, 3)].into());

        let cats: Vec<usize> = (0..7).collect();
        let aidv: BTreeMap<usize, f64> = cats.iter().map(|&c| (c, 10.0 - c as f64)).collect();
        let q = allocate_quotas(1000, &cats, &aidv);
        assert_eq!(q[&6], 142);
        assert!(cats[..6].iter().all(|c| q[c] == 143));
        assert_eq!(q.values().sum::<usize>(), 1000);

        // ties go to the lower id
        let flat: BTreeMap<usize, f64> = [(4, 1.0), (2, 1.0)].into();
        let q = allocate_quotas(3, &[2, 4], &flat);
        assert_eq!(q, [(2, 2), (4, 1)].into());
    }

    #[test]
    fn two_stage_selection() {
        let few = vec![cand(3, 0.0, 0.0), cand(1, 1.0, 1.0)];
        assert_eq!(select_old_category(&few, 5), vec![0, 1]);

        let c = vec![
            cand(1, 3.0, 0.0),
            cand(2, 2.0, 5.0),
            cand(3, 1.0, 9.0),
            cand(4, 0.0, 9.0),
        ];
        assert_eq!(select_old_category(&c, 1), vec![1]);
    }

    #[test]
    fn two_stage_matches_enumeration() {
        // every size-q subset S of the IDV top-2q set that is CDV-dominant
        // (no outside shortlisted item beats an inside one) must equal the result
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..300 {
            let n = rng.random_range(1..=8);
            let q = rng.random_range(0..=n);
            let cands: Vec<Candidate> = (0..n)
                .map(|i| cand(i as u64, rng.random_range(0..4) as f64, rng.random_range(0..4) as f64))
                .collect();
            let got = select_old_category(&cands, q);
            let better = |a: usize, b: usize, f: &dyn Fn(&Candidate) -> f64| {
                let (fa, fb) = (f(&cands[a]), f(&cands[b]));
                fa > fb || (fa == fb && a < b)
            };
            let shortlist: Vec<usize> = (0..n)
                .filter(|&i| (0..n).filter(|&j| better(j, i, &|c| c.scores.idv)).count() < (2 * q).min(n))
                .collect();
            let mut matches = Vec::new();
            for mask in 0u32..(1 << n) {
                let s: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
                if s.len() != q.min(n) || !s.iter().all(|i| shortlist.contains(i)) {
                    continue;
                }
                let dominant = s.iter().all(|&i| {
                    shortlist
                        .iter()
                        .filter(|j| !s.contains(j))
                        .all(|&j| better(i, j, &|c| c.scores.cdv))
                });
                if dominant {
                    matches.push(s);
                }
            }
            assert_eq!(matches, vec![got]);
        }
    }

    #[test]
    fn weighted_sampling_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = vec![cand(0, 3f64.ln(), 0.0), cand(1, 0.0, 0.0)];
        let trials = 100_000;
        let hits = (0..trials)
            .filter(|_| select_new_category(&c, 1, &mut rng) == vec![0])
            .count();
        let freq = hits as f64 / trials as f64;
        assert!((freq - 0.75).abs() < 0.01, "{freq}");

        let all = vec![cand(5, 0.0, 0.0), cand(6, 9.0, 0.0)];
        assert_eq!(select_new_category(&all, 2, &mut rng), vec![0, 1]);
    }

    #[test]
    fn uniform_idv_gives_uniform_subsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c: Vec<Candidate> = (0..4).map(|i| cand(i, 0.7, 0.0)).collect();
        let trials = 100_000;
        let mut counts = BTreeMap::new();
        for _ in 0..trials {
            let mut s = select_new_category(&c, 2, &mut rng);
            s.sort_unstable();
            *counts.entry(s).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        let p = 1.0 / 6.0;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for (_, n) in counts {
            assert!((n as f64 - trials as f64 * p).abs() < 3.0 * sigma);
        }
    }

    #[test]
    fn condition_number_cases() {
        let seen = CategoryMask::new([0, 1], 2).unwrap();
        let single =
            Buffer::from_items(4, seen.clone(), vec![item(0, 0, vec![1.0, 0.0], vec![0.5, 0.5], 0.5)]).unwrap();
        assert!((condition_number(&single, 1.0).unwrap() - 1.0).abs() < 1e-12);

        let same: Vec<ScoredItem> = (0..3)
            .map(|i| item(i, 0, vec![0.6, 0.8], vec![0.5, 0.5], 0.5))
            .collect();
        let dup = Buffer::from_items(4, seen.clone(), same).unwrap();
        let cond = condition_number(&dup, 1.0).unwrap();
        assert!((cond / (3.0 / EIGEN_FLOOR) - 1.0).abs() < 1e-3, "{cond}");

        let far = vec![
            item(0, 0, vec![1.0, 0.0], vec![0.5, 0.5], 0.5),
            item(1, 1, vec![0.0, 1.0], vec![0.5, 0.5], 0.5),
            item(2, 0, vec![-1.0, 0.0], vec![0.5, 0.5], 0.5),
        ];
        let sep = Buffer::from_items(4, seen, far).unwrap();
        assert!((condition_number(&sep, 50.0).unwrap() - 1.0).abs() < 1e-3);
        assert!(condition_number(&Buffer::new(3, 2), 1.0).is_none());
    }

    #[test]
    fn gram_is_symmetric_with_unit_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seen = CategoryMask::new([0, 1, 2], 3).unwrap();
        let items: Vec<ScoredItem> = (0..6)
            .map(|i| {
                let v: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                item(
                    i,
                    (i % 3) as usize,
                    v.iter().map(|x| x / n).collect(),
                    vec![0.3; 3],
                    0.3,
                )
            })
            .collect();
        let buf = Buffer::from_items(10, seen, items).unwrap();
        let g = gram_matrix(&buf, 2.0);
        for i in 0..6 {
            assert_eq!(g[(i, i)], 1.0);
            for j in 0..6 {
                assert_eq!(g[(i, j)], g[(j, i)]);
                assert!(g[(i, j)] > 0.0 && g[(i, j)] <= 1.0);
            }
        }
    }
}
