//! Seeded statistical stand-in for a real model.
//!
//! Correctness of a generation is a Bernoulli draw with the configured
//! per-level probability. Completion lengths are Poisson around the
//! per-level mean (floored at two tokens). Probe embeddings are
//! class-conditional isotropic Gaussians: on signal layers the mean is
//! `±separation/2` along the unit diagonal, on other layers it is zero, and
//! the variance is one everywhere. The class of a probe is the outcome of
//! the correctness draw for the same question and request seed, so a
//! probe predicts the answer that a `generate` call with that seed will give.
//!
//! All draws are keyed by (backend seed, model name, question key, request
//! seed, purpose), never by call order.

use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check_request, Backend, BackendError, BackendSpec, GenerateRequest, ModelCard, ProbeResult};
use crate::preinference::PROBE_INSTRUCTION;
use crate::seed::{fnv1a, RunSeed};
use crate::types::{normalize_answer, GenerationResult, Level};

/// Shortest synthetic completion: one answer token plus end-of-sequence.
const MIN_COMPLETION_TOKENS: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBackendConfig {
    pub model_name: String,
    /// Probability of a correct answer for levels 1..=5.
    pub per_level_accuracy: [f64; 5],
    /// Mean completion tokens of a full answer for levels 1..=5.
    pub completion_token_mean: [f64; 5],
    /// Mean tokens of a planning probe.
    pub probe_token_mean: f64,
    pub embedding_dim: usize,
    pub embedding_layers: usize,
    /// 1-indexed layers whose hidden states carry the class signal.
    pub signal_layers: Vec<usize>,
    pub class_separation: f64,
    pub probe_capable: bool,
    pub seed: RunSeed,
}

impl SyntheticBackendConfig {
    /// Short chain-of-thought model; accuracy per level is `1 - D` for mean
    /// difficulties 0.06, 0.20, 0.40, 0.58, 0.90.
    pub fn general_default() -> Self {
        Self {
            model_name: "synthetic-general-7b".into(),
            per_level_accuracy: [0.94, 0.80, 0.60, 0.42, 0.10],
            completion_token_mean: [300.0, 400.0, 550.0, 700.0, 900.0],
            probe_token_mean: 120.0,
            embedding_dim: 64,
            embedding_layers: 8,
            signal_layers: vec![5, 6],
            class_separation: 4.0,
            probe_capable: true,
            seed: RunSeed(0x5e1f),
        }
    }

    /// Stronger general model with higher per-level accuracy.
    pub fn general_strong() -> Self {
        Self {
            model_name: "synthetic-general-32b".into(),
            per_level_accuracy: [0.96, 0.86, 0.70, 0.54, 0.14],
            ..Self::general_default()
        }
    }

    /// Long chain-of-thought model.
    pub fn reasoning_default() -> Self {
        Self {
            model_name: "synthetic-reasoning-7b".into(),
            per_level_accuracy: [0.97, 0.93, 0.85, 0.75, 0.45],
            completion_token_mean: [1500.0, 2200.0, 3000.0, 3800.0, 4500.0],
            probe_token_mean: 120.0,
            embedding_dim: 64,
            embedding_layers: 8,
            signal_layers: vec![],
            class_separation: 0.0,
            probe_capable: false,
            seed: RunSeed(0x10c0),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if let Some(p) = self.per_level_accuracy.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(format!("accuracy {p} outside [0, 1]"));
        }
        let means = self.completion_token_mean.iter().chain(std::iter::once(&self.probe_token_mean));
        if let Some(m) = means.into_iter().find(|m| !m.is_finite() || **m < 0.0) {
            return Err(format!("token mean {m} must be finite and non-negative"));
        }
        if self.embedding_layers == 0 || self.embedding_dim == 0 {
            return Err("embedding shape must be at least 1x1".into());
        }
        if let Some(l) = self.signal_layers.iter().find(|l| !(1..=self.embedding_layers).contains(*l)) {
            return Err(format!("signal layer {l} outside 1..={}", self.embedding_layers));
        }
        if !self.class_separation.is_finite() || self.class_separation < 0.0 {
            return Err(format!("class separation {} must be non-negative", self.class_separation));
        }
        Ok(())
    }

    pub fn accuracy(&self, level: Level) -> f64 {
        self.per_level_accuracy[level.index()]
    }
}

/// Latent facts about a question the synthetic backend knows how to answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogItem {
    /// Stable key used to derive random streams; usually the query id.
    pub key: String,
    pub level: Level,
    pub gold: String,
}

/// Question text -> latent item. Prompts are matched exactly, or by the
/// question text that precedes a blank line (the probe prompt layout).
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    by_text: HashMap<String, CatalogItem>,
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, question: impl Into<String>, item: CatalogItem) {
        self.by_text.insert(question.into(), item);
    }

    pub fn len(&self) -> usize {
        self.by_text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_text.is_empty()
    }

    fn lookup(&self, prompt: &str) -> Option<&CatalogItem> {
        if let Some(item) = self.by_text.get(prompt) {
            return Some(item);
        }
        prompt
            .match_indices("\n\n")
            .find_map(|(i, _)| self.by_text.get(&prompt[..i]))
    }

    /// Resolves a prompt to an item; unknown prompts get a level and gold
    /// answer derived from a hash of the question text.
    pub fn resolve<'a>(&'a self, prompt: &str) -> Cow<'a, CatalogItem> {
        if let Some(item) = self.lookup(prompt) {
            return Cow::Borrowed(item);
        }
        let question = strip_probe_instruction(prompt);
        let h = fnv1a(question.as_bytes());
        let level = Level::new(1 + (h % 5) as u8).expect("1..=5");
        Cow::Owned(CatalogItem { key: format!("h{h:016x}"), level, gold: ((h >> 8) % 1000).to_string() })
    }
}

fn strip_probe_instruction(prompt: &str) -> &str {
    prompt
        .strip_suffix(PROBE_INSTRUCTION)
        .map(|p| p.trim_end_matches('\n'))
        .unwrap_or(prompt)
}

pub struct SyntheticBackend {
    spec: BackendSpec,
    config: SyntheticBackendConfig,
    catalog: Arc<Catalog>,
}

impl SyntheticBackend {
    pub fn new(spec: BackendSpec, config: SyntheticBackendConfig, catalog: Arc<Catalog>) -> Result<Self, BackendError> {
        config
            .validate()
            .map_err(|message| BackendError::Config { backend: spec.name.clone(), message })?;
        Ok(Self { spec, config, catalog })
    }

    pub fn config(&self) -> &SyntheticBackendConfig {
        &self.config
    }

    fn stream(&self, item: &CatalogItem, request_seed: u64, purpose: &str) -> RunSeed {
        self.config
            .seed
            .child(&self.config.model_name)
            .child(&item.key)
            .child_u64(request_seed)
            .child(purpose)
    }

    /// The correctness draw a `generate` call with `seed` makes for `prompt`,
    /// before any truncation.
    pub fn would_solve(&self, prompt: &str, seed: u64) -> bool {
        let item = self.catalog.resolve(prompt);
        self.solves(&item, seed)
    }

    fn solves(&self, item: &CatalogItem, seed: u64) -> bool {
        let p = self.config.accuracy(item.level);
        self.stream(item, seed, "correct").rng().random::<f64>() < p
    }

    fn natural_length(&self, stream: RunSeed, mean: f64) -> u32 {
        let draw = if mean > 0.0 {
            let poisson = Poisson::new(mean).expect("mean validated positive and finite");
            let sample: f64 = poisson.sample(&mut stream.rng());
            sample.min(f64::from(u32::MAX)) as u32
        } else {
            0
        };
        draw.max(MIN_COMPLETION_TOKENS)
    }

    fn embedding(&self, item: &CatalogItem, seed: u64, positive: bool) -> Vec<Vec<f32>> {
        let d = self.config.embedding_dim;
        let shift = self.config.class_separation / 2.0 / (d as f64).sqrt();
        let shift = if positive { shift } else { -shift };
        let mut rng = self.stream(item, seed, "embed").rng();
        (1..=self.config.embedding_layers)
            .map(|l| {
                let mean = if self.config.signal_layers.contains(&l) { shift } else { 0.0 };
                (0..d)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (mean + z) as f32
                    })
                    .collect()
            })
            .collect()
    }
}

fn wrong_answer(gold: &str, salt: u64) -> String {
    let norm = normalize_answer(gold);
    if let Ok(n) = norm.parse::<i64>() {
        return n.wrapping_add(1 + (salt % 9) as i64).to_string();
    }
    let mut chars = norm.chars();
    if let (Some(c @ 'a'..='e'), None) = (chars.next(), chars.next()) {
        let next = (b'a' + ((c as u8 - b'a' + 1 + (salt % 4) as u8) % 5)) as char;
        return next.to_string();
    }
    format!("{norm} (unsure)")
}

fn prompt_tokens(prompt: &str) -> u32 {
    prompt.split_whitespace().count() as u32
}

impl Backend for SyntheticBackend {
    fn spec(&self) -> &BackendSpec {
        &self.spec
    }

    fn advertise(&self) -> Result<ModelCard, BackendError> {
        Ok(ModelCard {
            model_name: self.config.model_name.clone(),
            layers: self.config.embedding_layers,
            dim: self.config.embedding_dim,
            probe_capable: self.config.probe_capable,
        })
    }

    fn generate(&self, request: &GenerateRequest) -> Result<GenerationResult, BackendError> {
        check_request(&self.spec, request)?;
        let seed = request.seed.unwrap_or(0);
        let item = self.catalog.resolve(&request.prompt);
        let mean = self.config.completion_token_mean[item.level.index()];
        let natural = self.natural_length(self.stream(&item, seed, "tokens"), mean);
        let truncated = natural > request.max_tokens;
        let completion_tokens = natural.min(request.max_tokens);
        let kind = self.spec.kind.as_str();
        let text = if truncated {
            format!("[{kind}] partial solution, stopped at {completion_tokens} tokens")
        } else {
            let answer = if self.solves(&item, seed) {
                item.gold.clone()
            } else {
                wrong_answer(&item.gold, fnv1a(item.key.as_bytes()) ^ seed)
            };
            format!("[{kind}] worked solution in {completion_tokens} tokens.\nThe answer is \\boxed{{{answer}}}")
        };
        Ok(GenerationResult { text, prompt_tokens: prompt_tokens(&request.prompt), completion_tokens, truncated })
    }

    fn probe(&self, request: &GenerateRequest) -> Result<ProbeResult, BackendError> {
        if !self.config.probe_capable {
            return Err(BackendError::Capability {
                backend: self.spec.name.clone(),
                message: "backend does not expose hidden states".into(),
            });
        }
        check_request(&self.spec, request)?;
        let seed = request.seed.unwrap_or(0);
        let item = self.catalog.resolve(&request.prompt);
        let natural = self.natural_length(self.stream(&item, seed, "probe-tokens"), self.config.probe_token_mean);
        let completion_tokens = natural.min(request.max_tokens);
        let generation = GenerationResult {
            text: format!("Brief plan: restate the givens, pick a method, compute ({completion_tokens} tokens)."),
            prompt_tokens: prompt_tokens(&request.prompt),
            completion_tokens,
            truncated: natural > request.max_tokens,
        };
        let layers = self.embedding(&item, seed, self.solves(&item, seed));
        Ok(ProbeResult { generation, layers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::BackendKind;

    fn general(config: SyntheticBackendConfig, catalog: Catalog) -> SyntheticBackend {
        let spec = BackendSpec::synthetic("gen", BackendKind::General, config.clone());
        SyntheticBackend::new(spec, config, Arc::new(catalog)).unwrap()
    }

    fn one_item(level: u8) -> Catalog {
        let mut c = Catalog::new();
        c.insert("What is 6*7?", CatalogItem { key: "q1".into(), level: Level::new(level).unwrap(), gold: "42".into() });
        c
    }

    #[test]
    fn budget_one_truncates() {
        let b = general(SyntheticBackendConfig::general_default(), Catalog::new());
        for prompt in ["anything", "What is 6*7?", ""] {
            let r = b.generate(&GenerateRequest::new(prompt, 1)).unwrap();
            assert_eq!(r.completion_tokens, 1);
            assert!(r.truncated);
        }
    }

    #[test]
    fn zero_budget_rejected() {
        let b = general(SyntheticBackendConfig::general_default(), Catalog::new());
        assert!(matches!(b.generate(&GenerateRequest::new("x", 0)), Err(BackendError::InvalidRequest { .. })));
    }

    #[test]
    fn equal_seeds_replay() {
        let b = general(SyntheticBackendConfig::general_default(), one_item(3));
        let req = GenerateRequest::new("What is 6*7?", 4096).with_seed(11);
        assert_eq!(b.generate(&req).unwrap(), b.generate(&req).unwrap());
        assert_eq!(b.probe(&req).unwrap(), b.probe(&req).unwrap());
    }

    #[test]
    fn advertise_echoes_config() {
        let cfg = SyntheticBackendConfig {
            embedding_layers: 4,
            embedding_dim: 8,
            signal_layers: vec![3],
            ..SyntheticBackendConfig::general_default()
        };
        let b = general(cfg, Catalog::new());
        let card = b.advertise().unwrap();
        assert_eq!((card.layers, card.dim, card.probe_capable), (4, 8, true));
        assert_eq!(card, b.advertise().unwrap());
        let p = b.probe(&GenerateRequest::new("q", 200)).unwrap();
        assert_eq!(p.layers.len(), 4);
        assert!(p.layers.iter().all(|l| l.len() == 8));
    }

    #[test]
    fn reasoning_default_cannot_probe() {
        let cfg = SyntheticBackendConfig::reasoning_default();
        let spec = BackendSpec::synthetic("r", BackendKind::Reasoning, cfg.clone());
        let b = SyntheticBackend::new(spec, cfg, Arc::default()).unwrap();
        assert!(matches!(b.probe(&GenerateRequest::new("q", 10)), Err(BackendError::Capability { .. })));
    }

    #[test]
    fn level_one_accuracy_converges() {
        // Bernoulli(0.94): over n trials the empirical rate sits within 3 sigma.
        let b = general(SyntheticBackendConfig::general_default(), one_item(1));
        let n = 4000u64;
        let correct = (0..n)
            .filter(|&s| {
                let r = b.generate(&GenerateRequest::new("What is 6*7?", 4096).with_seed(s)).unwrap();
                crate::types::grade(&r.text, "42").unwrap().is_positive()
            })
            .count() as f64;
        let p = 0.94;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((correct / n as f64 - p).abs() < 3.0 * sigma, "rate {}", correct / n as f64);
    }

    #[test]
    fn generate_correctness_matches_replayed_draw() {
        let b = general(SyntheticBackendConfig::general_default(), one_item(3));
        for s in 0..200 {
            let r = b.generate(&GenerateRequest::new("What is 6*7?", 4096).with_seed(s)).unwrap();
            let graded = crate::types::grade(&r.text, "42").unwrap().is_positive();
            assert_eq!(graded, b.would_solve("What is 6*7?", s));
        }
    }

    #[test]
    fn signal_layer_means_match_class_means() {
        // Probes of solvable draws have mean +sep/(2 sqrt d) per coordinate
        // on signal layers and zero elsewhere; unsolvable draws the mirror.
        let cfg = SyntheticBackendConfig {
            embedding_layers: 4,
            embedding_dim: 8,
            signal_layers: vec![3],
            class_separation: 4.0,
            per_level_accuracy: [0.5; 5],
            ..SyntheticBackendConfig::general_default()
        };
        let b = general(cfg, one_item(3));
        let expected = 2.0 / 8f64.sqrt();
        let (mut pos, mut neg) = ((0usize, [0f64; 4]), (0usize, [0f64; 4]));
        for s in 0..2000 {
            let req = GenerateRequest::new("What is 6*7?", 256).with_seed(s);
            let p = b.probe(&req).unwrap();
            let acc = if b.would_solve(&req.prompt, s) { &mut pos } else { &mut neg };
            acc.0 += 1;
            for (l, layer) in p.layers.iter().enumerate() {
                acc.1[l] += layer.iter().map(|&v| f64::from(v)).sum::<f64>() / 8.0;
            }
        }
        assert!(pos.0 > 800 && neg.0 > 800);
        for (count, sums, sign) in [(pos.0, pos.1, 1.0), (neg.0, neg.1, -1.0)] {
            // each per-layer mean averages count*8 unit normals
            let tol = 4.0 / ((count * 8) as f64).sqrt();
            for (l, sum) in sums.iter().enumerate() {
                let mean = sum / count as f64;
                let target = if l == 2 { sign * expected } else { 0.0 };
                assert!((mean - target).abs() < tol, "layer {} mean {mean} target {target}", l + 1);
            }
        }
    }

    #[test]
    fn catalog_matches_probe_layout() {
        let c = one_item(2);
        let probe = format!("What is 6*7?\n\n{PROBE_INSTRUCTION}");
        assert_eq!(c.resolve(&probe).key, "q1");
        let unknown = c.resolve("Unknown question");
        assert_eq!(unknown, c.resolve(&format!("Unknown question\n\n{PROBE_INSTRUCTION}")));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = SyntheticBackendConfig::general_default();
        cfg.per_level_accuracy[2] = 1.5;
        assert!(cfg.validate().is_err());
        let cfg = SyntheticBackendConfig { signal_layers: vec![9], ..SyntheticBackendConfig::general_default() };
        assert!(cfg.validate().is_err());
        let spec = BackendSpec::synthetic("g", BackendKind::General, cfg.clone());
        assert!(matches!(SyntheticBackend::new(spec, cfg, Arc::default()), Err(BackendError::Config { .. })));
    }

    #[test]
    fn wrong_answers_never_grade_correct() {
        for salt in 0..50 {
            for gold in ["42", "b", "7/2", "x+1"] {
                assert!(!crate::types::grade(&wrong_answer(gold, salt), gold).unwrap().is_positive());
            }
        }
    }
}
