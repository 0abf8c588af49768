//! The pre-inference stage: a budget-limited planning probe on the general
//! backend whose last-token hidden states become the capability embedding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, GenerateRequest};
use crate::types::{CapabilityEmbedding, EmbeddingError, Query};

macro_rules! probe_instruction {
    () => {
        "Please give a very brief primary plan about how to solve the problem. \
         Just give a very very brief plan, no need for details, calculations or final answer. \
         Just a very brief analysis. Less than 200 words."
    };
}

/// Planning instruction appended after the question.
pub const PROBE_INSTRUCTION: &str = probe_instruction!();

/// Default probe template: the question, a blank line, then the instruction.
pub const DEFAULT_TEMPLATE: &str = concat!("{question}\n\n", probe_instruction!());

pub const QUESTION_SLOT: &str = "{question}";

pub const DEFAULT_BUDGET_TOKENS: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LayerSelection {
    #[default]
    All,
    /// Keep only this (1-indexed) layer.
    Single(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreinferenceConfig {
    pub prompt_template: String,
    /// Maximum tokens the probe may generate.
    pub budget_tokens: u32,
    #[serde(default)]
    pub layer_selection: LayerSelection,
}

impl Default for PreinferenceConfig {
    fn default() -> Self {
        Self {
            prompt_template: DEFAULT_TEMPLATE.to_string(),
            budget_tokens: DEFAULT_BUDGET_TOKENS,
            layer_selection: LayerSelection::All,
        }
    }
}

impl PreinferenceConfig {
    pub fn validate(&self) -> Result<(), PreinferenceError> {
        if self.budget_tokens == 0 {
            return Err(PreinferenceError::Config("budget_tokens must be at least 1".into()));
        }
        match self.prompt_template.matches(QUESTION_SLOT).count() {
            1 => Ok(()),
            n => Err(PreinferenceError::Config(format!(
                "prompt template must contain exactly one {QUESTION_SLOT} slot, found {n}"
            ))),
        }
    }
}

#[derive(Debug, Error)]
pub enum PreinferenceError {
    #[error("pre-inference config: {0}")]
    Config(String),
    #[error("pre-inference probe: {0}")]
    Backend(#[from] BackendError),
    #[error("pre-inference embedding for {query_id}: {source}")]
    Embedding { query_id: String, source: EmbeddingError },
    #[error("pre-inference: layer {layer} not returned by backend ({available} layers)")]
    MissingLayer { layer: usize, available: usize },
}

pub fn render_prompt(query: &Query, config: &PreinferenceConfig) -> Result<String, PreinferenceError> {
    config.validate()?;
    if query.text.is_empty() {
        tracing::warn!(query_id = %query.id, "rendering probe prompt for an empty question");
    }
    Ok(config.prompt_template.replacen(QUESTION_SLOT, &query.text, 1))
}

/// Runs the probe for `query` and captures the embedding at its last
/// generated token. `seed` is forwarded to the backend.
pub fn collect_embedding(
    query: &Query,
    backend: &dyn Backend,
    config: &PreinferenceConfig,
    seed: u64,
) -> Result<CapabilityEmbedding, PreinferenceError> {
    let prompt = render_prompt(query, config)?;
    let request = GenerateRequest::new(prompt, config.budget_tokens).with_seed(seed);
    let probe = backend.probe(&request)?;
    let tokens = probe.generation.completion_tokens;
    if tokens == 0 {
        tracing::warn!(query_id = %query.id, "probe generated no tokens; using last prompt token states");
    }
    let available = probe.layers.len();
    let embedding = CapabilityEmbedding::new(query.id.clone(), probe.layers, probe.generation.text, tokens)
        .map_err(|source| PreinferenceError::Embedding { query_id: query.id.clone(), source })?;
    match config.layer_selection {
        LayerSelection::All => Ok(embedding),
        LayerSelection::Single(layer) => {
            embedding.retain_layer(layer).ok_or(PreinferenceError::MissingLayer { layer, available })
        }
    }
}
