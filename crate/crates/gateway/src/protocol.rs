//! Serves any [`Backend`] over the backend wire protocol, so a synthetic
//! backend can stand in for a model server.

use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use selfroute::backend::GenerateRequest;
use selfroute::{Backend, BackendError};
use serde_json::json;

/// Status code for a backend error. Transport failures map to 503 so wire
/// clients retry them; everything else is a 4xx or a non-retryable 500.
pub fn status_for(e: &BackendError) -> StatusCode {
    match e {
        BackendError::Transport { .. } => StatusCode::SERVICE_UNAVAILABLE,
        BackendError::InvalidRequest { .. } => StatusCode::BAD_REQUEST,
        BackendError::Capability { .. } => StatusCode::UNPROCESSABLE_ENTITY,
        BackendError::Protocol { .. } | BackendError::Config { .. } => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn error_response(e: BackendError) -> Response {
    (status_for(&e), Json(json!({ "error": e.to_string() }))).into_response()
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, BackendError> + Send + 'static,
) -> Result<T, Response> {
    match tokio::task::spawn_blocking(f).await {
        Ok(Ok(v)) => Ok(v),
        Ok(Err(e)) => Err(error_response(e)),
        Err(e) => Err((StatusCode::INTERNAL_SERVER_ERROR, Json(json!({ "error": e.to_string() }))).into_response()),
    }
}

async fn generate(State(b): State<Arc<dyn Backend>>, Json(req): Json<GenerateRequest>) -> Response {
    match blocking(move || b.generate(&req)).await {
        Ok(r) => Json(r).into_response(),
        Err(resp) => resp,
    }
}

async fn probe(State(b): State<Arc<dyn Backend>>, Json(req): Json<GenerateRequest>) -> Response {
    match blocking(move || b.probe(&req)).await {
        Ok(r) => Json(r).into_response(),
        Err(resp) => resp,
    }
}

async fn card(State(b): State<Arc<dyn Backend>>) -> Response {
    match blocking(move || b.advertise()).await {
        Ok(c) => Json(c).into_response(),
        Err(resp) => resp,
    }
}

pub fn backend_router(backend: Arc<dyn Backend>) -> Router {
    Router::new()
        .route("/v1/generate", post(generate))
        .route("/v1/probe", post(probe))
        .route("/v1/card", get(card))
        .with_state(backend)
}
