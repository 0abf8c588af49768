//! Generation backends.
//!
//! Every backend speaks the same request/response shapes as the HTTP wire
//! protocol:
//!
//! - `POST /v1/generate` `{prompt, max_tokens, seed?}` ->
//!   `{text, prompt_tokens, completion_tokens, truncated}`
//! - `POST /v1/probe` same request -> generate response plus
//!   `{layers: [[f32; d]; L]}`
//! - `GET /v1/card` -> `{model_name, layers, dim, probe_capable}`
//!
//! [`SyntheticBackend`] serves those shapes in-process from a seeded
//! statistical model; [`WireBackend`] is the HTTP client.

mod synthetic;
mod wire;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::GenerationResult;

pub use synthetic::{Catalog, CatalogItem, SyntheticBackend, SyntheticBackendConfig};
pub use wire::WireBackend;

/// Endpoint value that selects the in-process synthetic backend.
pub const SYNTHETIC_ENDPOINT: &str = "synthetic";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Short chain-of-thought model.
    General,
    /// Long chain-of-thought model.
    Reasoning,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::General => "general",
            BackendKind::Reasoning => "reasoning",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub name: String,
    pub kind: BackendKind,
    /// Base URL such as `http://127.0.0.1:8081`, or `"synthetic"`.
    pub endpoint: String,
    pub default_max_tokens: u32,
    pub request_timeout_ms: u64,
    /// Statistical model used when `endpoint` is `"synthetic"`. Missing means
    /// the default model for `kind`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticBackendConfig>,
}

impl BackendSpec {
    pub fn synthetic(name: impl Into<String>, kind: BackendKind, config: SyntheticBackendConfig) -> Self {
        Self {
            name: name.into(),
            kind,
            endpoint: SYNTHETIC_ENDPOINT.to_string(),
            default_max_tokens: default_max_tokens(kind),
            request_timeout_ms: 30_000,
            synthetic: Some(config),
        }
    }

    pub fn wire(name: impl Into<String>, kind: BackendKind, endpoint: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind,
            endpoint: endpoint.into(),
            default_max_tokens: default_max_tokens(kind),
            request_timeout_ms: 120_000,
            synthetic: None,
        }
    }

    pub fn is_synthetic(&self) -> bool {
        self.endpoint == SYNTHETIC_ENDPOINT
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_millis(self.request_timeout_ms)
    }

    /// Synthetic model for this spec, falling back to the per-kind default.
    pub fn synthetic_config(&self) -> SyntheticBackendConfig {
        self.synthetic.clone().unwrap_or_else(|| match self.kind {
            BackendKind::General => SyntheticBackendConfig::general_default(),
            BackendKind::Reasoning => SyntheticBackendConfig::reasoning_default(),
        })
    }

    pub fn build(&self) -> Result<Arc<dyn Backend>, BackendError> {
        self.build_with_catalog(Arc::new(Catalog::default()))
    }

    /// Builds the backend; `catalog` is only consulted by synthetic backends.
    pub fn build_with_catalog(&self, catalog: Arc<Catalog>) -> Result<Arc<dyn Backend>, BackendError> {
        if self.is_synthetic() {
            let backend = SyntheticBackend::new(self.clone(), self.synthetic_config(), catalog)?;
            Ok(Arc::new(backend))
        } else {
            Ok(Arc::new(WireBackend::new(self.clone())?))
        }
    }
}

fn default_max_tokens(kind: BackendKind) -> u32 {
    match kind {
        BackendKind::General => 4096,
        BackendKind::Reasoning => 32768,
    }
}

/// Request body shared by `/v1/generate` and `/v1/probe`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl GenerateRequest {
    pub fn new(prompt: impl Into<String>, max_tokens: u32) -> Self {
        Self { prompt: prompt.into(), max_tokens, seed: None }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }
}

/// `/v1/probe` response: a generation plus last-token hidden states per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    #[serde(flatten)]
    pub generation: GenerationResult,
    pub layers: Vec<Vec<f32>>,
}

/// `/v1/card` response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelCard {
    pub model_name: String,
    pub layers: usize,
    pub dim: usize,
    pub probe_capable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("backend {backend}: transport error: {message}")]
    Transport { backend: String, message: String },
    #[error("backend {backend}: protocol error: {message}")]
    Protocol { backend: String, message: String },
    #[error("backend {backend}: capability error: {message}")]
    Capability { backend: String, message: String },
    #[error("backend {backend}: invalid request: {message}")]
    InvalidRequest { backend: String, message: String },
    #[error("backend {backend}: invalid configuration: {message}")]
    Config { backend: String, message: String },
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport { .. })
    }

    pub fn backend(&self) -> &str {
        match self {
            BackendError::Transport { backend, .. }
            | BackendError::Protocol { backend, .. }
            | BackendError::Capability { backend, .. }
            | BackendError::InvalidRequest { backend, .. }
            | BackendError::Config { backend, .. } => backend,
        }
    }
}

/// A generation backend. Implementations are shareable handles and must be
/// safe to call concurrently.
pub trait Backend: Send + Sync {
    fn spec(&self) -> &BackendSpec;

    fn name(&self) -> &str {
        &self.spec().name
    }

    fn kind(&self) -> BackendKind {
        self.spec().kind
    }

    fn default_max_tokens(&self) -> u32 {
        self.spec().default_max_tokens
    }

    fn advertise(&self) -> Result<ModelCard, BackendError>;

    fn generate(&self, request: &GenerateRequest) -> Result<GenerationResult, BackendError>;

    fn probe(&self, request: &GenerateRequest) -> Result<ProbeResult, BackendError>;
}

/// Runs `op`, retrying retryable errors up to `retries` extra times.
pub fn with_retries<T>(
    retries: u32,
    mut op: impl FnMut() -> Result<T, BackendError>,
) -> Result<T, BackendError> {
    let mut attempt = 0;
    loop {
        match op() {
            Err(e) if e.is_retryable() && attempt < retries => {
                attempt += 1;
                tracing::debug!(attempt, error = %e, "retrying backend call");
            }
            other => return other,
        }
    }
}

pub(crate) fn check_request(spec: &BackendSpec, request: &GenerateRequest) -> Result<(), BackendError> {
    if request.max_tokens == 0 {
        return Err(BackendError::InvalidRequest {
            backend: spec.name.clone(),
            message: "max_tokens must be at least 1".into(),
        });
    }
    Ok(())
}
