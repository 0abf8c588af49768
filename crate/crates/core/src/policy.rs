//! Routing decisions, the end-to-end answering pipeline and the evaluation
//! arithmetic over its token ledgers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{with_retries, Backend, BackendSpec, GenerateRequest};
use crate::dataset::request_seed;
use rayon::prelude::*;
use crate::preinference::{collect_embedding, LayerSelection, PreinferenceConfig, PreinferenceError};
use crate::router::{RouterError, RouterModel, DECISION_THRESHOLD};
use crate::seed::RunSeed;
use crate::types::Query;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Path {
    Short,
    Long,
}

impl Path {
    pub fn as_str(self) -> &'static str {
        match self {
            Path::Short => "short",
            Path::Long => "long",
        }
    }
}

impl std::fmt::Display for Path {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Pipeline stage named in errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Config,
    Preinference,
    Router,
    ShortAnswer,
    LongAnswer,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Preinference => "preinference",
            Stage::Router => "router",
            Stage::ShortAnswer => "short-answer",
            Stage::LongAnswer => "long-answer",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("{stage}: {message}")]
    Stage { stage: Stage, message: String },
    #[error("report: {0}")]
    Report(String),
    #[error("mean long tokens must be positive, got {0}")]
    Domain(f64),
}

impl PolicyError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PolicyError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }

    fn at(stage: Stage, e: impl std::fmt::Display) -> Self {
        PolicyError::Stage { stage, message: e.to_string() }
    }
}

/// Short iff `p >= threshold`.
pub fn decide(p: f64, threshold: f64) -> Result<Path, PolicyError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(PolicyError::Threshold(threshold));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(PolicyError::Probability(p));
    }
    Ok(if p >= threshold { Path::Short } else { Path::Long })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutePolicyConfig {
    #[serde(default = "default_threshold")]
    pub route_threshold: f64,
    pub router: RouterModel,
    pub general: BackendSpec,
    pub reasoning: BackendSpec,
    #[serde(default)]
    pub preinference: PreinferenceConfig,
}

pub(crate) fn default_threshold() -> f64 {
    DECISION_THRESHOLD
}

/// Token accounting for one routed query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLedger {
    pub probe_tokens: u32,
    pub answer_prompt_tokens: u32,
    pub answer_completion_tokens: u32,
    pub path: Path,
    #[serde(rename = "P")]
    pub probability: f64,
}

impl TokenLedger {
    /// Every token billed for the query, including the answer prompt.
    pub fn total(&self) -> u64 {
        u64::from(self.probe_tokens) + u64::from(self.answer_prompt_tokens) + u64::from(self.answer_completion_tokens)
    }

    /// Generated tokens only: the probe plus the answer completion.
    pub fn generated(&self) -> u64 {
        u64::from(self.probe_tokens) + u64::from(self.answer_completion_tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteOutcome {
    pub query_id: String,
    pub text: String,
    pub truncated: bool,
    pub ledger: TokenLedger,
    /// Graded against gold when the query has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
}

impl RouteOutcome {
    pub fn result_row(&self) -> QueryResult {
        QueryResult {
            query_id: self.query_id.clone(),
            path: self.ledger.path,
            probability: self.ledger.probability,
            correct: self.correct,
            probe_tokens: self.ledger.probe_tokens,
            completion_tokens: self.ledger.answer_completion_tokens,
        }
    }
}

/// One line of a per-query evaluation JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    pub path: Path,
    #[serde(rename = "P")]
    pub probability: f64,
    pub correct: Option<bool>,
    pub probe_tokens: u32,
    pub completion_tokens: u32,
}

const BACKEND_RETRIES: u32 = 1;

/// A router plus both backends, ready to answer queries.
pub struct SelfRoute {
    config: RoutePolicyConfig,
    general: Arc<dyn Backend>,
    reasoning: Arc<dyn Backend>,
}

impl std::fmt::Debug for SelfRoute {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SelfRoute").field("config", &self.config).finish_non_exhaustive()
    }
}

impl SelfRoute {
    pub fn new(config: RoutePolicyConfig) -> Result<Self, PolicyError> {
        let general = config.general.build().map_err(|e| PolicyError::at(Stage::Config, e))?;
        let reasoning = config.reasoning.build().map_err(|e| PolicyError::at(Stage::Config, e))?;
        Self::with_backends(config, general, reasoning)
    }

    /// Uses prebuilt backends. Checks the router against the general
    /// backend's card, so shape errors surface before any generation.
    pub fn with_backends(
        config: RoutePolicyConfig,
        general: Arc<dyn Backend>,
        reasoning: Arc<dyn Backend>,
    ) -> Result<Self, PolicyError> {
        let cfg_err = |m: String| PolicyError::Stage { stage: Stage::Config, message: m };
        if !(0.0..=1.0).contains(&config.route_threshold) {
            return Err(PolicyError::Threshold(config.route_threshold));
        }
        config.preinference.validate().map_err(|e| PolicyError::at(Stage::Config, e))?;
        config.router.validate().map_err(|e| PolicyError::at(Stage::Config, e))?;
        let card = general.advertise().map_err(|e| PolicyError::at(Stage::Preinference, e))?;
        if !card.probe_capable {
            return Err(cfg_err(format!("general backend {} cannot probe", general.name())));
        }
        let layer = config.router.layer;
        if layer > card.layers {
            return Err(cfg_err(format!("router reads layer {layer} but the general backend has {} layers", card.layers)));
        }
        if config.router.dim != card.dim {
            return Err(cfg_err(format!("router dim {} but the general backend has dim {}", config.router.dim, card.dim)));
        }
        if let LayerSelection::Single(l) = config.preinference.layer_selection {
            if l != layer {
                return Err(cfg_err(format!("pre-inference keeps layer {l} but the router reads layer {layer}")));
            }
        }
        Ok(Self { config, general, reasoning })
    }

    pub fn config(&self) -> &RoutePolicyConfig {
        &self.config
    }

    pub fn router(&self) -> &RouterModel {
        &self.config.router
    }

    pub fn general(&self) -> &Arc<dyn Backend> {
        &self.general
    }

    pub fn reasoning(&self) -> &Arc<dyn Backend> {
        &self.reasoning
    }

    pub fn answer(&self, query: &Query, seed: RunSeed) -> Result<RouteOutcome, PolicyError> {
        self.answer_with_threshold(query, seed, self.config.route_threshold)
    }

    /// Probe, embed, predict, decide, then answer on the chosen backend with
    /// its default budget. Probe and answer share one request seed.
    pub fn answer_with_threshold(&self, query: &Query, seed: RunSeed, threshold: f64) -> Result<RouteOutcome, PolicyError> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(PolicyError::Threshold(threshold));
        }
        let request_seed = request_seed(seed, &query.id);
        let embedding = with_retries_pre(|| {
            collect_embedding(query, self.general.as_ref(), &self.config.preinference, request_seed)
        })
        .map_err(|e| PolicyError::at(Stage::Preinference, e))?;
        let p = self
            .config
            .router
            .predict_embedding(&embedding)
            .map_err(|e: RouterError| PolicyError::at(Stage::Router, e))?;
        let path = decide(p, threshold)?;
        let (backend, stage) = match path {
            Path::Short => (&self.general, Stage::ShortAnswer),
            Path::Long => (&self.reasoning, Stage::LongAnswer),
        };
        let request = GenerateRequest::new(query.text.clone(), backend.default_max_tokens()).with_seed(request_seed);
        let generation = with_retries(BACKEND_RETRIES, || backend.generate(&request))
            .map_err(|e| PolicyError::at(stage, e))?;
        let correct = query.grade(&generation.text).ok().map(|l| l.is_positive());
        Ok(RouteOutcome {
            query_id: query.id.clone(),
            truncated: generation.truncated,
            ledger: TokenLedger {
                probe_tokens: embedding.probe_tokens,
                answer_prompt_tokens: generation.prompt_tokens,
                answer_completion_tokens: generation.completion_tokens,
                path,
                probability: p,
            },
            text: generation.text,
            correct,
        })
    }

    /// Answers every query concurrently, preserving input order.
    pub fn answer_all(&self, queries: &[Query], seed: RunSeed) -> Vec<Result<RouteOutcome, PolicyError>> {
        queries.par_iter().map(|q| self.answer(q, seed)).collect()
    }
}

fn with_retries_pre<T>(mut op: impl FnMut() -> Result<T, PreinferenceError>) -> Result<T, PreinferenceError> {
    let mut attempt = 0;
    loop {
        match op() {
            Err(PreinferenceError::Backend(e)) if e.is_retryable() && attempt < BACKEND_RETRIES => {
                tracing::warn!(attempt, error = %e, "retrying probe");
                attempt += 1;
            }
            other => return other,
        }
    }
}

/// `100 * mean_probe / mean_long`, rounded half up to one decimal.
pub fn overhead_ratio(mean_probe: f64, mean_long: f64) -> Result<f64, PolicyError> {
    if mean_long.is_nan() || mean_long <= 0.0 || mean_long.is_infinite() {
        return Err(PolicyError::Domain(mean_long));
    }
    Ok(round_half_up(100.0 * mean_probe / mean_long, 1))
}

/// Rounds half up at `decimals` places, absorbing binary representation
/// error just below a half.
pub fn round_half_up(x: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    let scaled = x * scale;
    (scaled + 0.5 + 1e-9 * scaled.abs().max(1.0)).floor() / scale
}

/// `round(100 * (1 - tokens / reference))`, in whole percent.
pub fn reduction_percent(tokens: f64, reference: f64) -> Result<i64, PolicyError> {
    if reference.is_nan() || reference <= 0.0 {
        return Err(PolicyError::Domain(reference));
    }
    Ok((100.0 * (1.0 - tokens / reference)).round() as i64)
}

/// A method's score on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub dataset: String,
    pub accuracy: f64,
    pub mean_tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub dataset: String,
    pub accuracy: f64,
    pub mean_tokens: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub datasets: Vec<DatasetRow>,
    /// Unweighted mean of the dataset accuracies.
    pub avg_accuracy: f64,
    /// Size-weighted mean of the dataset token means.
    pub avg_tokens: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_avg_tokens: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduction_vs_reference: Option<i64>,
}

fn weighted_mean<'a>(values: impl Iterator<Item = (f64, usize)> + 'a) -> f64 {
    let (num, den) = values.fold((0.0, 0usize), |(s, n), (v, w)| (s + v * w as f64, n + w));
    if den == 0 {
        0.0
    } else {
        num / den as f64
    }
}

/// Aggregates per-dataset scores. `reference` holds per-dataset mean tokens
/// of the method to compare against; it is averaged with the same sizes.
pub fn report(
    per_dataset: &[DatasetScore],
    sizes: &BTreeMap<String, usize>,
    reference: &BTreeMap<String, f64>,
) -> Result<EvalReport, PolicyError> {
    if per_dataset.is_empty() {
        return Err(PolicyError::Report("no datasets".into()));
    }
    let datasets = per_dataset
        .iter()
        .map(|s| {
            let n = *sizes
                .get(&s.dataset)
                .ok_or_else(|| PolicyError::Report(format!("no size for dataset {}", s.dataset)))?;
            Ok(DatasetRow { dataset: s.dataset.clone(), accuracy: s.accuracy, mean_tokens: s.mean_tokens, n })
        })
        .collect::<Result<Vec<_>, PolicyError>>()?;
    let avg_accuracy = datasets.iter().map(|d| d.accuracy).sum::<f64>() / datasets.len() as f64;
    let avg_tokens = weighted_mean(datasets.iter().map(|d| (d.mean_tokens, d.n)));
    let (reference_avg_tokens, reduction_vs_reference) = if reference.is_empty() {
        (None, None)
    } else {
        let refs = datasets
            .iter()
            .map(|d| {
                reference
                    .get(&d.dataset)
                    .map(|&t| (t, d.n))
                    .ok_or_else(|| PolicyError::Report(format!("no reference tokens for dataset {}", d.dataset)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let r = weighted_mean(refs.into_iter());
        (Some(r), Some(reduction_percent(avg_tokens, r)?))
    };
    Ok(EvalReport { datasets, avg_accuracy, avg_tokens, reference_avg_tokens, reduction_vs_reference })
}

/// Reports per-dataset accuracy (percent) and mean generated tokens from
/// routed outcomes. Outcomes without a grade are skipped for accuracy.
pub fn score_outcomes(dataset: &str, outcomes: &[RouteOutcome]) -> DatasetScore {
    let graded: Vec<bool> = outcomes.iter().filter_map(|o| o.correct).collect();
    let accuracy = if graded.is_empty() {
        0.0
    } else {
        100.0 * graded.iter().filter(|&&c| c).count() as f64 / graded.len() as f64
    };
    let mean_tokens = if outcomes.is_empty() {
        0.0
    } else {
        outcomes.iter().map(|o| o.ledger.generated() as f64).sum::<f64>() / outcomes.len() as f64
    };
    DatasetScore { dataset: dataset.to_string(), accuracy, mean_tokens }
}

/// Renders methods as rows with accuracy and token columns per dataset and
/// an average column. All reports must cover the same datasets in order.
pub fn render_table(methods: &[(String, EvalReport)]) -> String {
    let Some((_, first)) = methods.first() else {
        return String::new();
    };
    let names: Vec<&str> = first.datasets.iter().map(|d| d.dataset.as_str()).collect();
    let width = methods.iter().map(|(m, _)| m.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = write!(out, "{:<width$}", "method");
    for n in names.iter().copied().chain(["AVG"]) {
        let _ = write!(out, " | {n:>17}");
    }
    out.push('\n');
    let _ = write!(out, "{:<width$}", "");
    for _ in 0..=names.len() {
        let _ = write!(out, " | {:>6} {:>10}", "Acc", "Tok");
    }
    out.push('\n');
    for (method, r) in methods {
        let _ = write!(out, "{method:<width$}");
        for d in &r.datasets {
            let _ = write!(out, " | {:>6.1} {:>10.1}", d.accuracy, d.mean_tokens);
        }
        let tok = match r.reduction_vs_reference {
            Some(p) => format!("{:.1} ({}{}%)", r.avg_tokens, if p >= 0 { "-" } else { "+" }, p.abs()),
            None => format!("{:.1}", r.avg_tokens),
        };
        let _ = write!(out, " | {:>6.1} {tok:>10}", r.avg_accuracy);
        out.push('\n');
    }
    out
}
