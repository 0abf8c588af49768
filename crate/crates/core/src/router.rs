//! The linear router.
//!
//! A router scores one layer of a capability embedding with `w·h + b` and
//! squashes the score through a logistic sigmoid into `P`, the probability
//! that the general backend answers the query correctly. Training minimizes
//! the summed binary cross-entropy with plain mini-batch SGD.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::LabeledExample;
use crate::seed::RunSeed;
use crate::types::{CapabilityEmbedding, Label};

/// Probability clamp used inside the log terms of the loss.
pub const LOSS_EPSILON: f64 = 1e-12;

/// Classification threshold for metrics.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum RouterError {
    #[error("dimension mismatch: router expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("training needs at least 2 examples, got {0}")]
    NotEnoughExamples(usize),
    #[error("example {query_id} has no layer {layer}")]
    MissingLayer { query_id: String, layer: usize },
    #[error("embeddings have no layers")]
    NoLayers,
    #[error("loss became non-finite at epoch {epoch}, batch {batch} (lr {learning_rate}); consider --standardize or a smaller learning rate")]
    NonFinite { epoch: usize, batch: usize, learning_rate: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("invalid router model: {0}")]
    InvalidModel(String),
    #[error("router model file {path}: {message}")]
    File { path: String, message: String },
}

/// Per-dimension standardization applied before scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    fn fit(rows: &[Example]) -> Self {
        let d = rows[0].features.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(&r.features) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(&r.features).zip(&mean) {
                *v += (x - m).powi(2) / n;
            }
        }
        let std = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, std }
    }
}

/// One feature row with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: Label,
}

impl Example {
    pub fn new(features: Vec<f64>, label: Label) -> Self {
        Self { features, label }
    }

    fn from_embedding(e: &LabeledExample, layer: usize) -> Result<Self, RouterError> {
        let h = e.embedding.layer(layer).ok_or_else(|| RouterError::MissingLayer {
            query_id: e.query_id.clone(),
            layer,
        })?;
        Ok(Self { features: h.iter().map(|&v| f64::from(v)).collect(), label: e.label })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterModel {
    /// 1-indexed embedding layer this router reads.
    pub layer: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    #[serde(default)]
    pub trained_on: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl RouterModel {
    pub fn new(layer: usize, weights: Vec<f64>, bias: f64) -> Self {
        Self { layer, dim: weights.len(), weights, bias, trained_on: String::new(), normalization: None }
    }

    pub fn zeros(layer: usize, dim: usize) -> Self {
        Self::new(layer, vec![0.0; dim], 0.0)
    }

    /// A router that outputs `p` for every input.
    pub fn constant(layer: usize, dim: usize, p: f64) -> Self {
        let p = p.clamp(LOSS_EPSILON, 1.0 - LOSS_EPSILON);
        Self::new(layer, vec![0.0; dim], (p / (1.0 - p)).ln())
    }

    pub fn validate(&self) -> Result<(), RouterError> {
        if self.layer == 0 {
            return Err(RouterError::InvalidModel("layer index is 1-based".into()));
        }
        if self.weights.len() != self.dim {
            return Err(RouterError::InvalidModel(format!("{} weights for dim {}", self.weights.len(), self.dim)));
        }
        if !self.bias.is_finite() || self.weights.iter().any(|w| !w.is_finite()) {
            return Err(RouterError::InvalidModel("non-finite parameter".into()));
        }
        if let Some(n) = &self.normalization {
            if n.mean.len() != self.dim || n.std.len() != self.dim || n.std.iter().any(|s| s.is_nan() || *s <= 0.0) {
                return Err(RouterError::InvalidModel("normalization stats do not match dim".into()));
            }
        }
        Ok(())
    }

    fn check_dim(&self, got: usize) -> Result<(), RouterError> {
        if got != self.dim {
            return Err(RouterError::DimensionMismatch { expected: self.dim, got });
        }
        Ok(())
    }

    /// Features after optional standardization.
    fn transform<'a>(&'a self, x: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        x.iter().enumerate().map(move |(i, v)| match &self.normalization {
            Some(n) => (v - n.mean[i]) / n.std[i],
            None => *v,
        })
    }

    fn logit_f64(&self, x: &[f64]) -> f64 {
        self.transform(x).zip(&self.weights).map(|(v, w)| v * w).sum::<f64>() + self.bias
    }

    /// Linear score `w·h + b`.
    pub fn score(&self, h: &[f32]) -> Result<f64, RouterError> {
        self.check_dim(h.len())?;
        let x: Vec<f64> = h.iter().map(|&v| f64::from(v)).collect();
        Ok(self.logit_f64(&x))
    }

    /// `P = sigmoid(w·h + b)`.
    pub fn predict(&self, h: &[f32]) -> Result<f64, RouterError> {
        self.score(h).map(sigmoid)
    }

    pub fn predict_features(&self, x: &[f64]) -> Result<f64, RouterError> {
        self.check_dim(x.len())?;
        Ok(sigmoid(self.logit_f64(x)))
    }

    /// Reads this router's layer out of a full embedding and predicts.
    pub fn predict_embedding(&self, e: &CapabilityEmbedding) -> Result<f64, RouterError> {
        let h = e.layer(self.layer).ok_or_else(|| RouterError::MissingLayer {
            query_id: e.query_id.clone(),
            layer: self.layer,
        })?;
        self.predict(h)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("router model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, RouterError> {
        let model: Self = serde_json::from_str(s).map_err(|e| RouterError::InvalidModel(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), RouterError> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| file_error(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, RouterError> {
        let s = std::fs::read_to_string(path).map_err(|e| file_error(path, e))?;
        Self::from_json(&s).map_err(|e| file_error(path, e))
    }
}

fn file_error(path: &Path, e: impl std::fmt::Display) -> RouterError {
    RouterError::File { path: path.display().to_string(), message: e.to_string() }
}

fn check_batch(model: &RouterModel, batch: &[Example]) -> Result<(), RouterError> {
    if batch.is_empty() {
        return Err(RouterError::EmptyBatch);
    }
    batch.iter().try_for_each(|e| model.check_dim(e.features.len()))
}

/// Summed binary cross-entropy with predictions clamped to `[ε, 1-ε]`.
pub fn loss(model: &RouterModel, batch: &[Example]) -> Result<f64, RouterError> {
    check_batch(model, batch)?;
    Ok(batch.iter().map(|e| example_loss(model, e)).sum())
}

fn example_loss(model: &RouterModel, e: &Example) -> f64 {
    let p = sigmoid(model.logit_f64(&e.features)).clamp(LOSS_EPSILON, 1.0 - LOSS_EPSILON);
    let y = e.label.as_f64();
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Gradient of [`loss`]: `(Σ(ŷ-y)·x, Σ(ŷ-y))`, with `x` standardized when
/// the model carries normalization stats.
pub fn gradient(model: &RouterModel, batch: &[Example]) -> Result<(Vec<f64>, f64), RouterError> {
    check_batch(model, batch)?;
    let mut dw = vec![0.0; model.dim];
    let mut db = 0.0;
    for e in batch {
        let r = sigmoid(model.logit_f64(&e.features)) - e.label.as_f64();
        for (g, x) in dw.iter_mut().zip(model.transform(&e.features)) {
            *g += r * x;
        }
        db += r;
    }
    Ok((dw, db))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: RunSeed,
    pub shuffle: bool,
    /// Fit per-dimension standardization on the training rows.
    #[serde(default)]
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 5, batch_size: 32, learning_rate: 1e-4, seed: RunSeed(0), shuffle: true, standardize: false }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RouterError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(RouterError::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(RouterError::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: RouterModel,
    /// Full-training-set loss after each epoch.
    pub loss_trace: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Trains a router on layer `layer` of labeled capability embeddings.
pub fn train(examples: &[LabeledExample], layer: usize, config: &TrainConfig) -> Result<TrainOutcome, RouterError> {
    let rows = examples
        .iter()
        .map(|e| Example::from_embedding(e, layer))
        .collect::<Result<Vec<_>, _>>()?;
    let mut outcome = fit(&rows, layer, config)?;
    outcome.model.trained_on = fingerprint(examples);
    Ok(outcome)
}

/// Trains on prepared feature rows.
pub fn fit(rows: &[Example], layer: usize, config: &TrainConfig) -> Result<TrainOutcome, RouterError> {
    config.validate()?;
    if rows.len() < 2 {
        return Err(RouterError::NotEnoughExamples(rows.len()));
    }
    let dim = rows[0].features.len();
    let mut model = RouterModel::zeros(layer, dim);
    check_batch(&model, rows)?;

    let mut warnings = Vec::new();
    let positives = rows.iter().filter(|r| r.label.is_positive()).count();
    if positives == 0 || positives == rows.len() {
        let msg = format!("training set for layer {layer} has a single class ({positives}/{} positive)", rows.len());
        tracing::warn!("{msg}");
        warnings.push(msg);
    }
    if config.standardize {
        model.normalization = Some(Normalization::fit(rows));
    }

    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut batch = Vec::with_capacity(config.batch_size);
    for epoch in 0..config.epochs {
        if config.shuffle {
            order.sort_unstable();
            order.shuffle(&mut config.seed.child("shuffle").child_u64(epoch as u64).rng());
        }
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| rows[i].clone()));
            let (dw, db) = gradient(&model, &batch)?;
            for (w, g) in model.weights.iter_mut().zip(&dw) {
                *w -= config.learning_rate * g;
            }
            model.bias -= config.learning_rate * db;
            if !model.bias.is_finite() || model.weights.iter().any(|w| !w.is_finite()) {
                return Err(RouterError::NonFinite { epoch, batch: b, learning_rate: config.learning_rate });
            }
        }
        let epoch_loss = loss(&model, rows)?;
        if !epoch_loss.is_finite() {
            return Err(RouterError::NonFinite { epoch, batch: usize::MAX, learning_rate: config.learning_rate });
        }
        tracing::debug!(layer, epoch, loss = epoch_loss, "epoch finished");
        loss_trace.push(epoch_loss);
    }
    Ok(TrainOutcome { model, loss_trace, warnings })
}

/// Stable short hash of example ids and labels.
pub fn fingerprint(examples: &[LabeledExample]) -> String {
    let mut h = Sha256::new();
    for e in examples {
        h.update(e.query_id.as_bytes());
        h.update([0, u8::from(e.label)]);
    }
    hex::encode(&h.finalize()[..8])
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn metrics(&self) -> RouterMetrics {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        RouterMetrics { accuracy: ratio(self.tp + self.tn, self.total()), precision, recall, f1 }
    }
}

/// Classification metrics; the positive class is "general backend solves it".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouterMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: RouterMetrics,
    pub confusion: Confusion,
}

pub fn evaluate_rows(model: &RouterModel, rows: &[Example]) -> Result<Evaluation, RouterError> {
    check_batch(model, rows)?;
    let mut confusion = Confusion::default();
    for r in rows {
        let p = sigmoid(model.logit_f64(&r.features));
        confusion.record(p >= DECISION_THRESHOLD, r.label.is_positive());
    }
    Ok(Evaluation { metrics: confusion.metrics(), confusion })
}

pub fn evaluate_router(model: &RouterModel, testset: &[LabeledExample]) -> Result<Evaluation, RouterError> {
    let rows = testset
        .iter()
        .map(|e| Example::from_embedding(e, model.layer))
        .collect::<Result<Vec<_>, _>>()?;
    evaluate_rows(model, &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerResult {
    pub layer: usize,
    pub metrics: RouterMetrics,
    pub confusion: Confusion,
    pub final_train_loss: f64,
    #[serde(skip)]
    pub model: Option<RouterModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub layers: Vec<LayerResult>,
    pub best_layer: usize,
    pub train_size: usize,
    pub val_size: usize,
}

impl SweepReport {
    pub fn best(&self) -> &LayerResult {
        self.layers.iter().find(|r| r.layer == self.best_layer).expect("best layer is in the report")
    }
}

/// Seeded split of `n` indices into (train, validation).
pub fn split_indices(n: usize, train_fraction: f64, seed: RunSeed) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed.child("split").rng());
    let cut = ((n as f64) * train_fraction.clamp(0.0, 1.0)).round() as usize;
    let val = idx.split_off(cut.min(n));
    (idx, val)
}

/// Trains one router per layer on the train split and scores it on the
/// validation split. The best layer maximizes validation accuracy; ties go
/// to the lower layer.
pub fn sweep_layers(
    examples: &[LabeledExample],
    train_fraction: f64,
    config: &TrainConfig,
) -> Result<SweepReport, RouterError> {
    let first = examples.first().ok_or(RouterError::NotEnoughExamples(0))?;
    let layers = first.embedding.num_layers();
    if layers == 0 {
        return Err(RouterError::NoLayers);
    }
    let layer_numbers = first.embedding.layer_numbers();
    for e in examples {
        if e.embedding.layer_numbers() != layer_numbers {
            return Err(RouterError::MissingLayer { query_id: e.query_id.clone(), layer: layer_numbers.end - 1 });
        }
    }
    let (train_idx, val_idx) = split_indices(examples.len(), train_fraction, config.seed);
    if val_idx.is_empty() {
        return Err(RouterError::Config("validation split is empty".into()));
    }
    let train_set: Vec<LabeledExample> = train_idx.iter().map(|&i| examples[i].clone()).collect();
    let val_set: Vec<LabeledExample> = val_idx.iter().map(|&i| examples[i].clone()).collect();

    let results: Vec<Result<LayerResult, RouterError>> = std::thread::scope(|s| {
        let handles: Vec<_> = layer_numbers
            .clone()
            .map(|layer| {
                let (train_set, val_set) = (&train_set, &val_set);
                s.spawn(move || -> Result<LayerResult, RouterError> {
                    let outcome = train(train_set, layer, config)?;
                    let eval = evaluate_router(&outcome.model, val_set)?;
                    Ok(LayerResult {
                        layer,
                        metrics: eval.metrics,
                        confusion: eval.confusion,
                        final_train_loss: *outcome.loss_trace.last().expect("epochs >= 1"),
                        model: Some(outcome.model),
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("layer job panicked")).collect()
    });
    let layers_out = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut best = &layers_out[0];
    for r in &layers_out[1..] {
        if r.metrics.accuracy > best.metrics.accuracy {
            best = r;
        }
    }
    let best_layer = best.layer;
    Ok(SweepReport { layers: layers_out, best_layer, train_size: train_set.len(), val_size: val_set.len() })
}
