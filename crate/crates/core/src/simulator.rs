//! Seeded synthetic worlds for comparing routing policies.
//!
//! A world is a fixed set of leveled questions whose short and long answers,
//! token counts and probe embeddings are all drawn once, up front, through
//! the synthetic backends. Every policy then reads the same draws, so two
//! policies that pick the same path for a query get the same outcome.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    Backend, BackendKind, BackendSpec, Catalog, CatalogItem, GenerateRequest, SyntheticBackend, SyntheticBackendConfig,
};
use crate::dataset::{request_seed, LabeledExample};
use rayon::prelude::*;
use crate::policy::{decide, reduction_percent, Path};
use crate::preinference::{collect_embedding, PreinferenceConfig};
use crate::router::{self, evaluate_router, RouterMetrics, RouterModel, TrainConfig, DECISION_THRESHOLD};
use crate::seed::{fnv1a, RunSeed};
use crate::types::{CapabilityEmbedding, Label, Level, Query};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("world spec: {0}")]
    Spec(String),
    #[error("world generation: {0}")]
    Generation(String),
    #[error("router: {0}")]
    Router(#[from] router::RouterError),
    #[error("threshold {0} outside [0, 1]")]
    Threshold(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    #[serde(default = "default_n_per_level")]
    pub n_per_level: usize,
    pub general: SyntheticBackendConfig,
    pub reasoning: SyntheticBackendConfig,
    #[serde(default)]
    pub preinference: PreinferenceConfig,
    #[serde(default)]
    pub seed: RunSeed,
}

fn default_n_per_level() -> usize {
    500
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            n_per_level: default_n_per_level(),
            general: SyntheticBackendConfig::general_default(),
            reasoning: SyntheticBackendConfig::reasoning_default(),
            preinference: PreinferenceConfig::default(),
            seed: RunSeed(0),
        }
    }
}

impl WorldSpec {
    pub fn with_seed(mut self, seed: RunSeed) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_separation(mut self, separation: f64) -> Self {
        self.general.class_separation = separation;
        self
    }

    /// Checks the spec; returns warnings for levels where the long backend is
    /// configured less accurate than the short one.
    pub fn validate(&self) -> Result<Vec<String>, SimError> {
        if self.n_per_level == 0 {
            return Err(SimError::Spec("n_per_level must be at least 1".into()));
        }
        self.general.validate().map_err(|e| SimError::Spec(format!("general: {e}")))?;
        self.reasoning.validate().map_err(|e| SimError::Spec(format!("reasoning: {e}")))?;
        if !self.general.probe_capable {
            return Err(SimError::Spec("general backend must be probe capable".into()));
        }
        self.preinference.validate().map_err(|e| SimError::Spec(e.to_string()))?;
        let mut warnings = Vec::new();
        for level in Level::ALL {
            let (s, l) = (self.general.accuracy(level), self.reasoning.accuracy(level));
            if l < s {
                warnings.push(format!("level {level}: long accuracy {l} is below short accuracy {s}"));
            }
        }
        Ok(warnings)
    }
}

/// One question with all of its pre-drawn outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldQuery {
    pub query: Query,
    pub level: Level,
    pub short_correct: bool,
    pub long_correct: bool,
    pub short_tokens: u32,
    pub long_tokens: u32,
    pub probe_tokens: u32,
    pub embedding: CapabilityEmbedding,
}

#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    pub queries: Vec<WorldQuery>,
    pub warnings: Vec<String>,
}

fn question_text(id: &str, level: Level) -> String {
    format!("Synthetic problem {id} (level {level}): find the value of x.")
}

pub fn make_world(spec: &WorldSpec) -> Result<World, SimError> {
    let warnings = spec.validate()?;
    let mut catalog = Catalog::new();
    let mut queries = Vec::with_capacity(spec.n_per_level * Level::ALL.len());
    for level in Level::ALL {
        for i in 0..spec.n_per_level {
            let id = format!("L{level}-{i:05}");
            let gold = (fnv1a(spec.seed.child(&id).0.to_le_bytes().as_slice()) % 1000).to_string();
            let text = question_text(&id, level);
            catalog.insert(text.clone(), CatalogItem { key: id.clone(), level, gold: gold.clone() });
            queries.push((Query::new(id, text).with_source(format!("level-{level}")).with_gold(gold), level));
        }
    }
    let catalog = Arc::new(catalog);
    let backend = |name: &str, kind, cfg: &SyntheticBackendConfig| {
        let spec = BackendSpec::synthetic(name, kind, cfg.clone());
        SyntheticBackend::new(spec, cfg.clone(), catalog.clone()).map_err(|e| SimError::Spec(e.to_string()))
    };
    let general = backend("general", BackendKind::General, &spec.general)?;
    let reasoning = backend("reasoning", BackendKind::Reasoning, &spec.reasoning)?;

    let drawn: Vec<Result<WorldQuery, SimError>> = queries.par_iter().map(|(query, level)| -> Result<WorldQuery, SimError> {
        let seed = request_seed(spec.seed, &query.id);
        let gen_err = |e: &dyn std::fmt::Display| SimError::Generation(format!("{}: {e}", query.id));
        let answer = |b: &SyntheticBackend| -> Result<(bool, u32), SimError> {
            let r = b
                .generate(&GenerateRequest::new(query.text.clone(), b.default_max_tokens()).with_seed(seed))
                .map_err(|e| gen_err(&e))?;
            let correct = query.grade(&r.text).map_err(|e| gen_err(&e))?.is_positive();
            Ok((correct, r.completion_tokens))
        };
        let (short_correct, short_tokens) = answer(&general)?;
        let (long_correct, long_tokens) = answer(&reasoning)?;
        let embedding = collect_embedding(query, &general, &spec.preinference, seed).map_err(|e| gen_err(&e))?;
        Ok(WorldQuery {
            query: query.clone(),
            level: *level,
            short_correct,
            long_correct,
            short_tokens,
            long_tokens,
            probe_tokens: embedding.probe_tokens,
            embedding,
        })
    }).collect();
    let queries = drawn.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(World { spec: spec.clone(), queries, warnings })
}

impl World {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Probe embeddings labeled by whether the short backend solved the query.
    pub fn labeled_examples(&self) -> Vec<LabeledExample> {
        self.queries
            .iter()
            .map(|q| LabeledExample {
                query_id: q.query.id.clone(),
                source: q.query.source.clone(),
                embedding: q.embedding.clone(),
                label: Label::new(q.short_correct),
            })
            .collect()
    }

    /// Fraction of queries the short backend solves.
    pub fn short_prior(&self) -> f64 {
        self.queries.iter().filter(|q| q.short_correct).count() as f64 / self.len().max(1) as f64
    }

    pub fn short_accuracy_by_level(&self) -> BTreeMap<Level, f64> {
        let mut acc: BTreeMap<Level, (usize, usize)> = BTreeMap::new();
        for q in &self.queries {
            let e = acc.entry(q.level).or_default();
            e.0 += usize::from(q.short_correct);
            e.1 += 1;
        }
        acc.into_iter().map(|(l, (c, n))| (l, c as f64 / n as f64)).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    AlwaysShort,
    AlwaysLong,
    /// Routes short exactly when the short answer is correct.
    OracleRoute,
    RouterRoute { model: &'a RouterModel, threshold: f64 },
}

impl Policy<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::AlwaysShort => "always_short",
            Policy::AlwaysLong => "always_long",
            Policy::OracleRoute => "oracle_route",
            Policy::RouterRoute { .. } => "router_route",
        }
    }

    fn probes(&self) -> bool {
        matches!(self, Policy::OracleRoute | Policy::RouterRoute { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub query_id: String,
    pub level: Level,
    pub path: Path,
    #[serde(rename = "P")]
    pub probability: f64,
    pub correct: bool,
    pub probe_tokens: u32,
    pub completion_tokens: u32,
}

impl SimRow {
    pub fn tokens(&self) -> u64 {
        u64::from(self.probe_tokens) + u64::from(self.completion_tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRun {
    pub policy: String,
    pub rows: Vec<SimRow>,
}

fn summarize<'a>(rows: impl Iterator<Item = &'a SimRow>) -> (f64, f64, f64, usize) {
    let (mut correct, mut tokens, mut short, mut n) = (0usize, 0u64, 0usize, 0usize);
    for r in rows {
        correct += usize::from(r.correct);
        tokens += r.tokens();
        short += usize::from(r.path == Path::Short);
        n += 1;
    }
    let d = n.max(1) as f64;
    (correct as f64 / d, tokens as f64 / d, short as f64 / d, n)
}

impl PolicyRun {
    pub fn accuracy(&self) -> f64 {
        summarize(self.rows.iter()).0
    }

    /// Mean generated tokens per query, probe included.
    pub fn mean_tokens(&self) -> f64 {
        summarize(self.rows.iter()).1
    }

    pub fn total_tokens(&self) -> u64 {
        self.rows.iter().map(SimRow::tokens).sum()
    }

    pub fn short_fraction(&self) -> f64 {
        summarize(self.rows.iter()).2
    }

    pub fn per_level(&self) -> Vec<LevelRow> {
        Level::ALL
            .iter()
            .map(|&level| {
                let (accuracy, mean_tokens, short_fraction, n) = summarize(self.rows.iter().filter(|r| r.level == level));
                LevelRow { policy: self.policy.clone(), level, n, accuracy, mean_tokens, short_fraction }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRow {
    pub policy: String,
    pub level: Level,
    pub n: usize,
    pub accuracy: f64,
    pub mean_tokens: f64,
    pub short_fraction: f64,
}

pub fn run_policy(world: &World, policy: Policy<'_>) -> Result<PolicyRun, SimError> {
    if let Policy::RouterRoute { model, threshold } = policy {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(SimError::Threshold(threshold));
        }
        if let Some(q) = world.queries.first() {
            model.predict_embedding(&q.embedding)?;
        }
    }
    let probability = |q: &WorldQuery| -> Result<f64, SimError> {
        Ok(match policy {
            Policy::AlwaysShort => 1.0,
            Policy::AlwaysLong => 0.0,
            Policy::OracleRoute => f64::from(u8::from(q.short_correct)),
            Policy::RouterRoute { model, .. } => model.predict_embedding(&q.embedding)?,
        })
    };
    let threshold = match policy {
        Policy::RouterRoute { threshold, .. } => threshold,
        _ => DECISION_THRESHOLD,
    };
    let rows = world
        .queries
        .iter()
        .map(|q| {
            let p = probability(q)?;
            let path = decide(p, threshold).map_err(|e| SimError::Spec(e.to_string()))?;
            let (correct, completion_tokens) = match path {
                Path::Short => (q.short_correct, q.short_tokens),
                Path::Long => (q.long_correct, q.long_tokens),
            };
            Ok(SimRow {
                query_id: q.query.id.clone(),
                level: q.level,
                path,
                probability: p,
                correct,
                probe_tokens: if policy.probes() { q.probe_tokens } else { 0 },
                completion_tokens,
            })
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    Ok(PolicyRun { policy: policy.name().to_string(), rows })
}

/// Fraction of the world that `router` sends to the short backend.
pub fn solvable_fraction(world: &World, router: &RouterModel, threshold: f64) -> Result<f64, SimError> {
    Ok(run_policy(world, Policy::RouterRoute { model: router, threshold })?.short_fraction())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub world: WorldSpec,
    #[serde(default)]
    pub train: TrainConfig,
    /// Router layer; `None` picks the best layer of a sweep on the training world.
    #[serde(default)]
    pub layer: Option<usize>,
    #[serde(default = "crate::policy::default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_sweep_fraction")]
    pub sweep_train_fraction: f64,
}

fn default_sweep_fraction() -> f64 {
    0.8
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            world: WorldSpec::default(),
            train: TrainConfig::default(),
            layer: None,
            threshold: DECISION_THRESHOLD,
            sweep_train_fraction: default_sweep_fraction(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: String,
    pub accuracy: f64,
    pub mean_tokens: f64,
    pub short_fraction: f64,
    pub reduction_vs_long: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub seed: RunSeed,
    pub queries: usize,
    pub router_layer: usize,
    pub router_metrics: RouterMetrics,
    pub short_prior: f64,
    pub policies: Vec<PolicySummary>,
    pub per_level: Vec<LevelRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Trains a router on one world and compares the four policies on a second,
/// independently drawn world from the same spec.
pub fn simulate(config: &SimulationConfig) -> Result<(SimulationReport, RouterModel), SimError> {
    if !(0.0..=1.0).contains(&config.threshold) {
        return Err(SimError::Threshold(config.threshold));
    }
    let seed = config.world.seed;
    let train_world = make_world(&config.world.clone().with_seed(seed.child("train")))?;
    let eval_world = make_world(&config.world.clone().with_seed(seed.child("eval")))?;
    let examples = train_world.labeled_examples();
    let train_cfg = TrainConfig { seed: config.train.seed.child("router"), ..config.train.clone() };
    let layer = match config.layer {
        Some(l) => l,
        None => router::sweep_layers(&examples, config.sweep_train_fraction, &train_cfg)?.best_layer,
    };
    let outcome = router::train(&examples, layer, &train_cfg)?;
    let model = outcome.model;
    let router_metrics = evaluate_router(&model, &eval_world.labeled_examples())?.metrics;

    let runs = [
        Policy::AlwaysShort,
        Policy::AlwaysLong,
        Policy::OracleRoute,
        Policy::RouterRoute { model: &model, threshold: config.threshold },
    ]
    .into_iter()
    .map(|p| run_policy(&eval_world, p))
    .collect::<Result<Vec<_>, _>>()?;
    let long_tokens = runs[1].mean_tokens();
    let policies = runs
        .iter()
        .map(|r| PolicySummary {
            policy: r.policy.clone(),
            accuracy: r.accuracy(),
            mean_tokens: r.mean_tokens(),
            short_fraction: r.short_fraction(),
            reduction_vs_long: reduction_percent(r.mean_tokens(), long_tokens).unwrap_or(0),
        })
        .collect();
    let mut warnings = eval_world.warnings.clone();
    warnings.extend(outcome.warnings);
    let report = SimulationReport {
        seed,
        queries: eval_world.len(),
        router_layer: layer,
        router_metrics,
        short_prior: eval_world.short_prior(),
        policies,
        per_level: runs.iter().flat_map(PolicyRun::per_level).collect(),
        warnings,
    };
    Ok((report, model))
}

impl SimulationReport {
    pub fn policy(&self, name: &str) -> Option<&PolicySummary> {
        self.policies.iter().find(|p| p.policy == name)
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "world: {} queries, short prior {:.3}, router layer {} (val acc {:.3}, f1 {:.3})",
            self.queries, self.short_prior, self.router_layer, self.router_metrics.accuracy, self.router_metrics.f1
        );
        let _ = writeln!(out, "{:<14} {:>9} {:>11} {:>8} {:>9}", "policy", "accuracy", "mean_tok", "short%", "vs_long");
        for p in &self.policies {
            let _ = writeln!(
                out,
                "{:<14} {:>9.4} {:>11.1} {:>8.1} {:>8}%",
                p.policy,
                p.accuracy,
                p.mean_tokens,
                100.0 * p.short_fraction,
                -p.reduction_vs_long
            );
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }

    pub fn per_level_csv(&self) -> String {
        let mut out = String::from("policy,level,n,accuracy,mean_tokens,short_fraction\n");
        for r in &self.per_level {
            let _ = writeln!(out, "{},{},{},{:.6},{:.3},{:.6}", r.policy, r.level, r.n, r.accuracy, r.mean_tokens, r.short_fraction);
        }
        out
    }
}
