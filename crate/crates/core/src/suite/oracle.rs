//! Straight-line reimplementation of buffer maintenance with the two-stage
//! kernel policy, written with scalar loops and no calls into the buffer
//! module. Used to cross-check [`crate::buffer::maintain`].

use std::collections::BTreeMap;

use rand::Rng;

use crate::data::Sample;
use crate::model::ModelParams;

const FLOOR: f64 = 1e-12;

/// One maintenance problem: the samples currently buffered, the new round's
/// data and the category sets before and after the round.
#[derive(Debug, Clone)]
pub struct OracleInstance {
    pub model: ModelParams,
    pub capacity: usize,
    pub old_samples: Vec<Sample>,
    pub new_samples: Vec<Sample>,
    /// Ascending.
    pub old_categories: Vec<usize>,
    /// Ascending, a superset of `old_categories`.
    pub all_categories: Vec<usize>,
}

struct Row {
    id: u64,
    label: usize,
    g: Vec<f64>,
    probs: Vec<f64>,
    p: f64,
}

fn embed(model: &ModelParams, s: &Sample, cats: &[usize]) -> Row {
    let hidden = model.b1.len();
    let mut a = vec![0.0; hidden];
    for (j, aj) in a.iter_mut().enumerate() {
        let mut z = model.b1[j];
        for (i, x) in s.features.iter().enumerate() {
            z += model.w1[(j, i)] * x;
        }
        *aj = z.tanh();
    }
    let mut logits = Vec::with_capacity(cats.len());
    for &c in cats {
        let mut z = model.bh[c];
        for (j, aj) in a.iter().enumerate() {
            z += model.h[(c, j)] * aj;
        }
        logits.push(z);
    }
    let mut norm = 0.0;
    for z in &logits {
        norm += z * z;
    }
    let norm = norm.sqrt();
    let mut g = vec![0.0; cats.len()];
    if norm < 1e-12 {
        g[0] = 1.0;
    } else {
        for k in 0..cats.len() {
            g[k] = logits[k] / norm;
        }
    }
    let mut max = f64::NEG_INFINITY;
    for z in &logits {
        if *z > max {
            max = *z;
        }
    }
    let mut probs = vec![0.0; cats.len()];
    let mut total = 0.0;
    for k in 0..cats.len() {
        probs[k] = (logits[k] - max).exp();
        total += probs[k];
    }
    for p in probs.iter_mut() {
        *p /= total;
    }
    let rank = cats.iter().position(|&c| c == s.label).expect("label in categories");
    Row {
        id: s.id,
        label: s.label,
        p: probs[rank],
        g,
        probs,
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut d = 0.0;
    for i in 0..a.len() {
        d += (a[i] - b[i]) * (a[i] - b[i]);
    }
    d
}

/// Selected sample ids per category, each list ascending.
pub fn oracle_maintain<R: Rng + ?Sized>(inst: &OracleInstance, rng: &mut R) -> BTreeMap<usize, Vec<u64>> {
    let cats = &inst.all_categories;
    let d = cats.len() as f64;
    let mut rows = Vec::new();
    for s in inst.old_samples.iter().chain(&inst.new_samples) {
        rows.push(embed(&inst.model, s, cats));
    }
    let n_old = inst.old_samples.len();
    let m = n_old as f64;
    let beta = if n_old == 0 { 1.0 } else { m.powf(2.0 / d) };
    let (l1, l2) = if n_old == 0 {
        (0.0, 0.0)
    } else {
        (m.ln() / m.sqrt(), 1.0 / m.sqrt())
    };

    // (id, idv, cdv) per category
    let mut scored: BTreeMap<usize, Vec<(u64, f64, f64)>> = BTreeMap::new();
    for &c in cats {
        scored.insert(c, Vec::new());
    }
    for row in &rows {
        let mut ds = 0.0;
        for (j, o) in rows[..n_old].iter().enumerate() {
            let dist = sq_dist(&row.g, &o.g);
            if j == 0 || dist < ds {
                ds = dist;
            }
        }
        let rank = cats.iter().position(|&c| c == row.label).unwrap();
        let is_old = inst.old_categories.contains(&row.label);
        let (idv, cdv);
        if is_old && n_old > 0 {
            let mut ks = Vec::new();
            let mut den = 0.0;
            for o in &rows[..n_old] {
                let k = (-beta * sq_dist(&row.g, &o.g)).exp();
                ks.push(k);
                den += k;
            }
            let (before, after) = if den <= f64::MIN_POSITIVE {
                (row.p, row.p)
            } else {
                let mut mean = 0.0;
                let mut num = 0.0;
                for (j, o) in rows[..n_old].iter().enumerate() {
                    mean += (ks[j] / den) * o.probs[rank];
                    num += ks[j] * o.probs[rank];
                }
                (mean, (num + row.p) / (den + 1.0))
            };
            idv = -(before.max(FLOOR)).ln() + l1 * ds;
            cdv = (row.p.max(FLOOR) / after.max(FLOOR)).ln() + l2 * ds;
        } else {
            idv = -(row.p.max(FLOOR)).ln() + l1 * ds;
            cdv = 0.0;
        }
        scored.get_mut(&row.label).unwrap().push((row.id, idv, cdv));
    }
    for list in scored.values_mut() {
        list.sort_by_key(|e| e.0);
    }

    // quotas: Q each, +1 for the R categories with the highest mean IDV
    let q = inst.capacity / cats.len();
    let r = inst.capacity % cats.len();
    let mut ranking: Vec<(usize, f64)> = Vec::new();
    for &c in cats {
        let list = &scored[&c];
        let mean = if list.is_empty() {
            f64::NEG_INFINITY
        } else {
            list.iter().map(|e| e.1).sum::<f64>() / list.len() as f64
        };
        ranking.push((c, mean));
    }
    ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut quota = BTreeMap::new();
    for (i, (c, _)) in ranking.iter().enumerate() {
        quota.insert(*c, if i < r { q + 1 } else { q });
    }

    let mut out = BTreeMap::new();
    for &c in cats {
        let list = &scored[&c];
        let qc = quota[&c];
        let mut chosen: Vec<u64> = Vec::new();
        if inst.old_categories.contains(&c) {
            let mut by_idv = list.clone();
            by_idv.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            by_idv.truncate(2 * qc);
            by_idv.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
            by_idv.truncate(qc);
            chosen.extend(by_idv.iter().map(|e| e.0));
        } else if qc >= list.len() {
            chosen.extend(list.iter().map(|e| e.0));
        } else {
            let mut max = f64::NEG_INFINITY;
            for e in list {
                max = max.max(e.1);
            }
            let mut pool: Vec<(u64, f64)> = list.iter().map(|e| (e.0, (e.1 - max).exp())).collect();
            for _ in 0..qc {
                let total: f64 = pool.iter().map(|e| e.1).sum();
                let u = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut pick = pool.len() - 1;
                for (j, e) in pool.iter().enumerate() {
                    acc += e.1;
                    if u < acc {
                        pick = j;
                        break;
                    }
                }
                chosen.push(pool.remove(pick).0);
            }
        }
        chosen.sort_unstable();
        if !chosen.is_empty() {
            out.insert(c, chosen);
        }
    }
    out
}
