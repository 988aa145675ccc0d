//! The two-part classifier shared by every method: a single tanh hidden
//! layer acting as the feature extractor and an affine output layer with a
//! fixed number of rows (`c_max`) that is masked down to the categories a
//! client is currently allowed to predict.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::data::Sample;
use crate::error::{FedError, Result};

/// Probability floor applied before taking a log in the loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// hidden_dim x feature_dim
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    /// c_max x hidden_dim
    pub h: DMatrix<f64>,
    pub bh: DVector<f64>,
}

impl ModelParams {
    pub fn zeros(feature_dim: usize, hidden_dim: usize, c_max: usize) -> Self {
        ModelParams {
            w1: DMatrix::zeros(hidden_dim, feature_dim),
            b1: DVector::zeros(hidden_dim),
            h: DMatrix::zeros(c_max, hidden_dim),
            bh: DVector::zeros(c_max),
        }
    }

    /// Uniform fan-in initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
    pub fn init<R: Rng>(feature_dim: usize, hidden_dim: usize, c_max: usize, rng: &mut R) -> Self {
        let a1 = 1.0 / (feature_dim.max(1) as f64).sqrt();
        let a2 = 1.0 / (hidden_dim.max(1) as f64).sqrt();
        let w1 = DMatrix::from_fn(hidden_dim, feature_dim, |_, _| rng.random_range(-a1..=a1));
        let h = DMatrix::from_fn(c_max, hidden_dim, |_, _| rng.random_range(-a2..=a2));
        ModelParams {
            w1,
            b1: DVector::zeros(hidden_dim),
            h,
            bh: DVector::zeros(c_max),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn c_max(&self) -> usize {
        self.h.nrows()
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.w1.shape() == other.w1.shape()
            && self.b1.len() == other.b1.len()
            && self.h.shape() == other.h.shape()
            && self.bh.len() == other.bh.len()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn blocks(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.h.as_slice(),
            self.bh.as_slice(),
        ]
    }

    pub(crate) fn blocks_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.h.as_mut_slice(),
            self.bh.as_mut_slice(),
        ]
    }

    /// Every parameter in a fixed order (w1 column-major, b1, h column-major, bh).
    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn scaled(&self, a: f64) -> ModelParams {
        ModelParams {
            w1: &self.w1 * a,
            b1: &self.b1 * a,
            h: &self.h * a,
            bh: &self.bh * a,
        }
    }
}

/// The set of output neurons that participate in a softmax, stored both as a
/// sorted id list and as a dense lookup table of length `c_max`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryMask {
    ids: Vec<usize>,
    active: Vec<bool>,
}

impl CategoryMask {
    pub fn new<I: IntoIterator<Item = usize>>(ids: I, c_max: usize) -> Result<Self> {
        let set: BTreeSet<usize> = ids.into_iter().collect();
        if let Some(&bad) = set.iter().find(|&&c| c >= c_max) {
            return Err(FedError::InvalidMask(format!("category {bad} outside [0, {c_max})")));
        }
        let mut active = vec![false; c_max];
        for &c in &set {
            active[c] = true;
        }
        Ok(CategoryMask {
            ids: set.into_iter().collect(),
            active,
        })
    }

    pub fn empty(c_max: usize) -> Self {
        CategoryMask {
            ids: Vec::new(),
            active: vec![false; c_max],
        }
    }

    pub fn contains(&self, c: usize) -> bool {
        self.active.get(c).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn c_max(&self) -> usize {
        self.active.len()
    }

    /// Active ids in ascending order.
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Position of `c` within the ascending id list.
    pub fn rank_of(&self, c: usize) -> Option<usize> {
        self.ids.binary_search(&c).ok()
    }

    pub fn union(&self, other: &CategoryMask) -> CategoryMask {
        let mut active = self.active.clone();
        for &c in &other.ids {
            active[c] = true;
        }
        let ids = (0..active.len()).filter(|&c| active[c]).collect();
        CategoryMask { ids, active }
    }

    pub fn is_subset(&self, other: &CategoryMask) -> bool {
        self.ids.iter().all(|&c| other.contains(c))
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            Err(FedError::InvalidMask("mask has no active categories".into()))
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub dw1: DMatrix<f64>,
    pub db1: DVector<f64>,
    pub dh: DMatrix<f64>,
    pub dbh: DVector<f64>,
    pub output_layer_only: bool,
}

impl GradientBundle {
    pub fn zeros_like(params: &ModelParams, output_layer_only: bool) -> Self {
        GradientBundle {
            dw1: DMatrix::zeros(params.w1.nrows(), params.w1.ncols()),
            db1: DVector::zeros(params.b1.len()),
            dh: DMatrix::zeros(params.h.nrows(), params.h.ncols()),
            dbh: DVector::zeros(params.bh.len()),
            output_layer_only,
        }
    }

    pub(crate) fn blocks(&self) -> [&[f64]; 4] {
        [
            self.dw1.as_slice(),
            self.db1.as_slice(),
            self.dh.as_slice(),
            self.dbh.as_slice(),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// `self += a * other`
    pub fn add_scaled(&mut self, other: &GradientBundle, a: f64) {
        self.dw1 += &other.dw1 * a;
        self.db1 += &other.db1 * a;
        self.dh += &other.dh * a;
        self.dbh += &other.dbh * a;
    }

    /// Output-layer block (dH column-major, then dbH) as one vector.
    pub fn output_layer_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dh.len() + self.dbh.len());
        v.extend_from_slice(self.dh.as_slice());
        v.extend_from_slice(self.dbh.as_slice());
        v
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().concat()
    }
}

fn check_features(params: &ModelParams, x: &[f64]) -> Result<()> {
    if x.len() != params.feature_dim() {
        return Err(FedError::config(
            "feature_dim",
            format!("input has {} features, model expects {}", x.len(), params.feature_dim()),
        ));
    }
    Ok(())
}

/// Raw logits `h(tanh(W1 x + b1))`, one per output row.
pub fn forward(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    check_features(params, x)?;
    let x = DVector::from_column_slice(x);
    let a = (&params.w1 * x + &params.b1).map(f64::tanh);
    Ok((&params.h * a + &params.bh).as_slice().to_vec())
}

/// Softmax restricted to `mask`; inactive entries are exactly zero.
pub fn masked_softmax(logits: &[f64], mask: &CategoryMask) -> Result<Vec<f64>> {
    mask.require_nonempty()?;
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, mask.ids(), &mut out);
    Ok(out)
}

fn softmax_into(logits: &[f64], ids: &[usize], out: &mut [f64]) {
    let max = ids.iter().map(|&c| logits[c]).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &c in ids {
        let e = (logits[c] - max).exp();
        out[c] = e;
        sum += e;
    }
    for &c in ids {
        out[c] /= sum;
    }
}

/// Predicted category under `mask`; ties go to the lowest id.
pub fn masked_argmax(logits: &[f64], mask: &CategoryMask) -> Result<usize> {
    mask.require_nonempty()?;
    let mut best = mask.ids()[0];
    for &c in &mask.ids()[1..] {
        if logits[c] > logits[best] {
            best = c;
        }
    }
    Ok(best)
}

/// Logits for a batch, one column per sample (c_max x n), plus the hidden activations.
fn forward_batch(params: &ModelParams, batch: &[&Sample]) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n = batch.len();
    let fd = params.feature_dim();
    let mut x = DMatrix::zeros(fd, n);
    for (j, s) in batch.iter().enumerate() {
        x.column_mut(j).copy_from_slice(&s.features);
    }
    let mut z = &params.w1 * &x;
    for mut col in z.column_iter_mut() {
        col += &params.b1;
    }
    let a = z.map(f64::tanh);
    let mut logits = &params.h * &a;
    for mut col in logits.column_iter_mut() {
        col += &params.bh;
    }
    (x, a, logits)
}

/// Mean masked cross-entropy over `batch` and its exact gradient.
///
/// With `output_layer_only` the hidden-layer blocks of the returned bundle are
/// left at zero; the H/bH blocks are computed identically in both modes.
pub fn ce_loss_and_grad(
    params: &ModelParams,
    batch: &[&Sample],
    mask: &CategoryMask,
    output_layer_only: bool,
) -> Result<(f64, GradientBundle)> {
    mask.require_nonempty()?;
    if batch.is_empty() {
        return Err(FedError::Contract("loss requested on an empty batch".into()));
    }
    for s in batch {
        check_features(params, &s.features)?;
        if !mask.contains(s.label) {
            return Err(FedError::Contract(format!(
                "sample {} has label {} outside the active mask",
                s.id, s.label
            )));
        }
    }

    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let (x, a, logits) = forward_batch(params, batch);

    // dL/dlogits, zero on inactive rows
    let mut g = DMatrix::zeros(params.c_max(), n);
    let mut loss = 0.0;
    let mut probs = vec![0.0; params.c_max()];
    for (j, s) in batch.iter().enumerate() {
        let col = logits.column(j);
        softmax_into(col.as_slice(), mask.ids(), &mut probs);
        loss -= probs[s.label].max(PROB_FLOOR).ln();
        for &c in mask.ids() {
            let y = if c == s.label { 1.0 } else { 0.0 };
            g[(c, j)] = (probs[c] - y) * inv_n;
        }
    }
    loss *= inv_n;

    let mut grad = GradientBundle::zeros_like(params, output_layer_only);
    grad.dh = &g * a.transpose();
    grad.dbh = g.column_sum();
    if !output_layer_only {
        let da = params.h.transpose() * &g;
        let dz = da.component_mul(&a.map(|v| 1.0 - v * v));
        grad.dw1 = &dz * x.transpose();
        grad.db1 = dz.column_sum();
    }
    Ok((loss, grad))
}

/// Mean masked cross-entropy without gradients.
pub fn ce_loss(params: &ModelParams, batch: &[&Sample], mask: &CategoryMask) -> Result<f64> {
    ce_loss_and_grad(params, batch, mask, true).map(|(l, _)| l)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adaptive moments with decoupled weight decay.
    Adamw,
    /// Plain gradient descent (weight decay still applied, decoupled).
    Sgd,
}

/// Optimizer with a per-epoch cosine-annealed learning rate.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr0: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: ModelParams,
    v: ModelParams,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, like: &ModelParams, lr0: f64, weight_decay: f64, epochs: usize) -> Self {
        let zero = ModelParams::zeros(like.feature_dim(), like.hidden_dim(), like.c_max());
        OptimizerState {
            kind,
            lr0,
            weight_decay,
            epochs,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zero.clone(),
            v: zero,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// `lr0 * (1 + cos(pi * (epoch - 1) / J)) / 2` for `epoch` in `1..=J`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let j = self.epochs as f64;
        let e = (epoch as f64) - 1.0;
        self.lr0 * (1.0 + (std::f64::consts::PI * e / j).cos()) / 2.0
    }

    pub fn step(&mut self, params: &mut ModelParams, grad: &GradientBundle, epoch: usize) -> Result<()> {
        if epoch == 0 || epoch > self.epochs {
            return Err(FedError::Contract(format!(
                "epoch {epoch} outside [1, {}]",
                self.epochs
            )));
        }
        if !params.same_shape(&self.m) {
            return Err(FedError::config("model", "optimizer and parameter shapes differ"));
        }
        if !grad.is_finite() {
            return Err(FedError::NonFinite("gradient contains NaN or infinity".into()));
        }
        let lr = self.learning_rate(epoch);
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let kind = self.kind;

        let grads = grad.blocks();
        let ms = self.m.blocks_mut();
        let vs = self.v.blocks_mut();
        for (((p, g), m), v) in params.blocks_mut().into_iter().zip(grads).zip(ms).zip(vs) {
            for i in 0..p.len() {
                p[i] -= lr * wd * p[i];
                match kind {
                    OptimizerKind::Adamw => {
                        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        p[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                    OptimizerKind::Sgd => p[i] -= lr * g[i],
                }
            }
        }
        if !params.is_finite() {
            return Err(FedError::NonFinite("parameters left the finite range".into()));
        }
        Ok(())
    }
}

/// Unweighted elementwise mean of the models.
pub fn params_average(models: &[&ModelParams]) -> Result<ModelParams> {
    let w = vec![1.0; models.len()];
    params_weighted_average(models, &w)
}

/// Elementwise mean weighted by `weights` (normalised internally).
pub fn params_weighted_average(models: &[&ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let first = models
        .first()
        .ok_or_else(|| FedError::config("models", "cannot average an empty model list"))?;
    if weights.len() != models.len() {
        return Err(FedError::config("weights", "one weight per model is required"));
    }
    if models.iter().any(|m| !m.same_shape(first)) {
        return Err(FedError::config("models", "model shapes differ"));
    }
    let total: f64 = weights.iter().sum();
    if models.len() == 1 && total > 0.0 {
        return Ok((*first).clone());
    }
    if !total.is_finite() || total <= 0.0 || weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(FedError::config(
            "weights",
            "weights must be non-negative with a positive sum",
        ));
    }
    let mut out = ModelParams::zeros(first.feature_dim(), first.hidden_dim(), first.c_max());
    for (m, &w) in models.iter().zip(weights) {
        for (o, src) in out.blocks_mut().into_iter().zip(m.blocks()) {
            for (a, b) in o.iter_mut().zip(src) {
                *a += w * b;
            }
        }
    }
    for o in out.blocks_mut() {
        for a in o.iter_mut() {
            *a /= total;
        }
    }
    Ok(out)
}
