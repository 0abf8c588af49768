//! The routed-inference HTTP service.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;

use selfroute::policy::{Path, RoutePolicyConfig, SelfRoute};
use selfroute::{Backend, ModelCard, Query, RouterModel, RunSeed};

use crate::config::GatewayConfig;
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteRequest {
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub probe: u32,
    pub prompt: u32,
    pub completion: u32,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteResponse {
    pub query_id: String,
    pub answer: String,
    pub path: Path,
    pub probability: f64,
    pub threshold: f64,
    pub tokens: TokenCounts,
    pub router_layer: usize,
}

/// Counters over successfully served requests.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub requests: u64,
    pub short_count: u64,
    pub long_count: u64,
    pub errors: u64,
    pub total_probe_tokens: u64,
    pub total_completion_tokens: u64,
    pub mean_probe_tokens: f64,
    pub mean_completion_tokens: f64,
}

impl Stats {
    fn record(&mut self, path: Path, probe: u32, completion: u32) {
        self.requests += 1;
        match path {
            Path::Short => self.short_count += 1,
            Path::Long => self.long_count += 1,
        }
        self.total_probe_tokens += u64::from(probe);
        self.total_completion_tokens += u64::from(completion);
        self.mean_probe_tokens = self.total_probe_tokens as f64 / self.requests as f64;
        self.mean_completion_tokens = self.total_completion_tokens as f64 / self.requests as f64;
    }
}

/// Startup summary printed by `serve --check` and logged by `serve`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartupInfo {
    pub listen: String,
    pub router_path: String,
    pub router_layer: usize,
    pub router_dim: usize,
    pub route_threshold: f64,
    pub concurrency_limit: usize,
    pub general: ModelCard,
    pub reasoning: ModelCard,
}

pub struct AppState {
    pipeline: SelfRoute,
    limit: Semaphore,
    stats: Mutex<Stats>,
    seed: RunSeed,
    info: StartupInfo,
}

impl AppState {
    pub fn info(&self) -> &StartupInfo {
        &self.info
    }

    pub fn stats(&self) -> Stats {
        self.stats.lock().expect("stats lock").clone()
    }
}

/// Loads the router, builds both backends and health-checks them.
pub fn startup(cfg: &GatewayConfig) -> Result<Arc<AppState>, CliError> {
    cfg.validate()?;
    let router = RouterModel::load(&cfg.router_path).map_err(|e| CliError::new("startup", e))?;
    let general = cfg.general.build().map_err(|e| CliError::new("startup", e))?;
    let reasoning = cfg.reasoning.build().map_err(|e| CliError::new("startup", e))?;
    startup_with(cfg, router, general, reasoning)
}

pub fn startup_with(
    cfg: &GatewayConfig,
    router: RouterModel,
    general: Arc<dyn Backend>,
    reasoning: Arc<dyn Backend>,
) -> Result<Arc<AppState>, CliError> {
    let check = |b: &Arc<dyn Backend>| {
        b.advertise().map_err(|e| CliError::new("startup", format!("health check of {} failed: {e}", b.name())))
    };
    let general_card = check(&general)?;
    let reasoning_card = check(&reasoning)?;
    let info = StartupInfo {
        listen: cfg.listen.clone(),
        router_path: cfg.router_path.display().to_string(),
        router_layer: router.layer,
        router_dim: router.dim,
        route_threshold: cfg.route_threshold,
        concurrency_limit: cfg.concurrency_limit,
        general: general_card,
        reasoning: reasoning_card,
    };
    let policy = RoutePolicyConfig {
        route_threshold: cfg.route_threshold,
        router,
        general: cfg.general.clone(),
        reasoning: cfg.reasoning.clone(),
        preinference: cfg.preinference.clone(),
    };
    let pipeline = SelfRoute::with_backends(policy, general, reasoning)
        .map_err(|e| CliError::new("startup", e))?;
    Ok(Arc::new(AppState {
        pipeline,
        limit: Semaphore::new(cfg.concurrency_limit),
        stats: Mutex::new(Stats::default()),
        seed: cfg.seed,
        info,
    }))
}

/// Hex prefix of the question's SHA-256; also the request's query id.
pub fn query_hash(question: &str) -> String {
    hex::encode(&Sha256::digest(question.as_bytes())[..8])
}

fn error(status: StatusCode, stage: &str, message: impl std::fmt::Display) -> Response {
    (status, Json(json!({ "error": message.to_string(), "stage": stage }))).into_response()
}

async fn route(State(state): State<Arc<AppState>>, Json(req): Json<RouteRequest>) -> Response {
    let threshold = req.threshold.unwrap_or(state.info.route_threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return error(StatusCode::BAD_REQUEST, "request", format!("threshold {threshold} outside [0, 1]"));
    }
    let Ok(_permit) = state.limit.acquire().await else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "request", "gateway is shutting down");
    };
    let id = query_hash(&req.question);
    let query = Query::new(id.clone(), req.question);
    let worker = state.clone();
    let result =
        tokio::task::spawn_blocking(move || worker.pipeline.answer_with_threshold(&query, worker.seed, threshold)).await;
    let outcome = match result {
        Ok(Ok(o)) => o,
        Ok(Err(e)) => {
            state.stats.lock().expect("stats lock").errors += 1;
            let err = CliError::from(e);
            tracing::warn!(query = %id, stage = %err.stage, error = %err.message, "route failed");
            return error(StatusCode::BAD_GATEWAY, &err.stage, err.message);
        }
        Err(e) => {
            state.stats.lock().expect("stats lock").errors += 1;
            return error(StatusCode::INTERNAL_SERVER_ERROR, "gateway", e);
        }
    };
    let l = &outcome.ledger;
    state.stats.lock().expect("stats lock").record(l.path, l.probe_tokens, l.answer_completion_tokens);
    tracing::info!(
        query = %id,
        path = %l.path,
        p = l.probability,
        probe = l.probe_tokens,
        prompt = l.answer_prompt_tokens,
        completion = l.answer_completion_tokens,
        "routed"
    );
    Json(RouteResponse {
        query_id: id,
        path: l.path,
        probability: l.probability,
        threshold,
        tokens: TokenCounts {
            probe: l.probe_tokens,
            prompt: l.answer_prompt_tokens,
            completion: l.answer_completion_tokens,
            total: l.total(),
        },
        router_layer: state.info.router_layer,
        answer: outcome.text,
    })
    .into_response()
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    Json(json!({
        "status": "ok",
        "general": state.info.general.model_name,
        "reasoning": state.info.reasoning.model_name,
        "router_layer": state.info.router_layer,
    }))
    .into_response()
}

async fn stats(State(state): State<Arc<AppState>>) -> Response {
    Json(state.stats()).into_response()
}

pub fn app(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/route", post(route))
        .route("/v1/health", get(health))
        .route("/v1/stats", get(stats))
        .with_state(state)
}

/// Binds `addr` and serves `router` until the process receives Ctrl-C.
pub async fn serve_router(router: Router, addr: &str) -> Result<(), CliError> {
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| CliError::new("startup", format!("{addr}: {e}")))?;
    let local = listener.local_addr().map_err(|e| CliError::new("startup", e))?;
    tracing::info!(addr = %local, "listening");
    axum::serve(listener, router)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::new("serve", e))
}

/// Serves `router` on an ephemeral local port in the background.
pub async fn spawn_local(router: Router) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let addr = listener.local_addr()?;
    let handle = tokio::spawn(async move {
        let _ = axum::serve(listener, router).await;
    });
    Ok((addr, handle))
}
