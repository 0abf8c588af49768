//! Blocking HTTP client for the backend wire protocol.

use std::sync::OnceLock;

use serde::de::DeserializeOwned;
use serde::Serialize;
use ureq::Agent;

use super::{check_request, Backend, BackendError, BackendSpec, GenerateRequest, ModelCard, ProbeResult};
use crate::types::{validate_layers, GenerationResult};

pub struct WireBackend {
    spec: BackendSpec,
    base: String,
    agent: Agent,
    card: OnceLock<ModelCard>,
}

impl WireBackend {
    pub fn new(spec: BackendSpec) -> Result<Self, BackendError> {
        let base = spec.endpoint.trim_end_matches('/').to_string();
        if !(base.starts_with("http://") || base.starts_with("https://")) {
            return Err(BackendError::Config {
                backend: spec.name.clone(),
                message: format!("endpoint {:?} is neither a http(s) URL nor \"synthetic\"", spec.endpoint),
            });
        }
        let agent = Agent::config_builder()
            .timeout_global(Some(spec.request_timeout()))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { spec, base, agent, card: OnceLock::new() })
    }

    fn transport(&self, e: impl std::fmt::Display) -> BackendError {
        BackendError::Transport { backend: self.spec.name.clone(), message: e.to_string() }
    }

    fn protocol(&self, message: impl Into<String>) -> BackendError {
        BackendError::Protocol { backend: self.spec.name.clone(), message: message.into() }
    }

    fn decode<T: DeserializeOwned>(&self, path: &str, mut resp: ureq::http::Response<ureq::Body>) -> Result<T, BackendError> {
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| self.transport(e))?;
        match status {
            200..=299 => serde_json::from_str(&body)
                .map_err(|e| self.protocol(format!("{path}: malformed response: {e}"))),
            500..=599 => Err(self.transport(format!("{path}: status {status}: {body}"))),
            _ => Err(self.protocol(format!("{path}: status {status}: {body}"))),
        }
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, BackendError> {
        let resp = self
            .agent
            .post(format!("{}{path}", self.base))
            .send_json(body)
            .map_err(|e| self.transport(e))?;
        self.decode(path, resp)
    }

    fn fetch_card(&self) -> Result<ModelCard, BackendError> {
        let resp = self
            .agent
            .get(format!("{}/v1/card", self.base))
            .call()
            .map_err(|e| self.transport(e))?;
        if resp.status().as_u16() == 404 {
            // Generation-only server.
            return Ok(ModelCard { model_name: self.spec.name.clone(), layers: 0, dim: 0, probe_capable: false });
        }
        self.decode("/v1/card", resp)
    }
}

impl Backend for WireBackend {
    fn spec(&self) -> &BackendSpec {
        &self.spec
    }

    fn advertise(&self) -> Result<ModelCard, BackendError> {
        if let Some(card) = self.card.get() {
            return Ok(card.clone());
        }
        let card = self.fetch_card()?;
        Ok(self.card.get_or_init(|| card).clone())
    }

    fn generate(&self, request: &GenerateRequest) -> Result<GenerationResult, BackendError> {
        check_request(&self.spec, request)?;
        let r: GenerationResult = self.post("/v1/generate", request)?;
        if r.completion_tokens > request.max_tokens {
            return Err(self.protocol(format!(
                "completion_tokens {} exceeds budget {}",
                r.completion_tokens, request.max_tokens
            )));
        }
        Ok(r)
    }

    fn probe(&self, request: &GenerateRequest) -> Result<ProbeResult, BackendError> {
        let card = self.advertise()?;
        if !card.probe_capable {
            return Err(BackendError::Capability {
                backend: self.spec.name.clone(),
                message: "server does not advertise a probe route".into(),
            });
        }
        check_request(&self.spec, request)?;
        let r: ProbeResult = self.post("/v1/probe", request)?;
        if r.layers.len() != card.layers || r.layers.iter().any(|l| l.len() != card.dim) {
            let dims: Vec<usize> = r.layers.iter().map(Vec::len).collect();
            return Err(self.protocol(format!(
                "probe returned {} layers with dims {dims:?}, card advertises {}x{}",
                r.layers.len(),
                card.layers,
                card.dim
            )));
        }
        validate_layers(&r.layers).map_err(|e| self.protocol(e.to_string()))?;
        if r.generation.completion_tokens > request.max_tokens {
            return Err(self.protocol("probe exceeded its token budget"));
        }
        Ok(r)
    }
}
