//! The wire client against the protocol server, and both against the shared
//! JSON schemas.

mod common;

use std::sync::Arc;

use axum::routing::{get, post};
use axum::{Json, Router};
use common::{agent, get as http_get, post as http_post, validator, Servers};
use selfroute::backend::{Catalog, GenerateRequest, SyntheticBackend, SyntheticBackendConfig, WireBackend};
use selfroute::preinference::{render_prompt, PreinferenceConfig};
use selfroute::{Backend, BackendError, BackendKind, BackendSpec, Query};
use serde_json::json;

fn synthetic(kind: BackendKind) -> Arc<dyn Backend> {
    let cfg = match kind {
        BackendKind::General => SyntheticBackendConfig::general_default(),
        BackendKind::Reasoning => SyntheticBackendConfig::reasoning_default(),
    };
    let spec = BackendSpec::synthetic("synthetic", kind, cfg.clone());
    Arc::new(SyntheticBackend::new(spec, cfg, Arc::new(Catalog::new())).unwrap())
}

fn wire(url: &str, kind: BackendKind) -> WireBackend {
    WireBackend::new(BackendSpec::wire("wire", kind, url)).unwrap()
}

fn bits(layers: &[Vec<f32>]) -> Vec<u32> {
    layers.iter().flatten().map(|v| v.to_bits()).collect()
}

#[test]
fn wire_client_reproduces_direct_calls() {
    let servers = Servers::new();
    let direct = synthetic(BackendKind::General);
    let url = servers.spawn_backend(direct.clone());
    let client = wire(&url, BackendKind::General);
    assert_eq!(client.advertise().unwrap(), direct.advertise().unwrap());
    for i in 0..20 {
        let prompt = render_prompt(&Query::new("q", format!("What is {i} squared?")), &PreinferenceConfig::default()).unwrap();
        let req = GenerateRequest::new(prompt, 256).with_seed(i);
        let (a, b) = (client.probe(&req).unwrap(), direct.probe(&req).unwrap());
        assert_eq!(a.generation, b.generation);
        assert_eq!(bits(&a.layers), bits(&b.layers));
        let req = GenerateRequest::new(format!("What is {i} squared?"), 4096).with_seed(i);
        assert_eq!(client.generate(&req).unwrap(), direct.generate(&req).unwrap());
    }
}

#[test]
fn responses_validate_against_schemas() {
    let servers = Servers::new();
    let url = servers.spawn_backend(synthetic(BackendKind::General));
    let http = agent();
    let (card_v, gen_v, probe_v, req_v, err_v) = (
        validator("model_card"),
        validator("generate_response"),
        validator("probe_response"),
        validator("generate_request"),
        validator("error"),
    );
    let (status, card) = http_get(&http, &format!("{url}/v1/card"));
    assert_eq!(status, 200);
    assert!(card_v.is_valid(&card), "{card}");
    for i in 0..10u64 {
        let req = serde_json::to_value(GenerateRequest::new(format!("Question {i}"), 64 + i as u32).with_seed(i)).unwrap();
        assert!(req_v.is_valid(&req));
        let (s, gen) = http_post(&http, &format!("{url}/v1/generate"), &req);
        assert_eq!(s, 200);
        assert!(gen_v.is_valid(&gen), "{gen}");
        let (s, probe) = http_post(&http, &format!("{url}/v1/probe"), &req);
        assert_eq!(s, 200);
        assert!(probe_v.is_valid(&probe));
        let layers = probe["layers"].as_array().unwrap();
        assert_eq!(layers.len() as u64, card["layers"].as_u64().unwrap());
        assert!(layers.iter().all(|l| l.as_array().unwrap().len() as u64 == card["dim"].as_u64().unwrap()));
    }
    let unseeded = serde_json::to_value(GenerateRequest::new("x", 1)).unwrap();
    assert!(unseeded.get("seed").is_none() && req_v.is_valid(&unseeded));
    assert!(!req_v.is_valid(&json!({ "prompt": "x", "max_tokens": 0 })));

    let (s, err) = http_post(&http, &format!("{url}/v1/generate"), &json!({ "prompt": "x", "max_tokens": 0 }));
    assert_eq!(s, 400);
    assert!(err_v.is_valid(&err), "{err}");
}

#[test]
fn seeded_repeats_are_byte_identical() {
    let servers = Servers::new();
    let url = servers.spawn_backend(synthetic(BackendKind::General));
    let http = agent();
    let body = json!({ "prompt": "Explain 7*8.", "max_tokens": 200, "seed": 12 });
    let raw = |path: &str| -> String {
        let mut r = http.post(format!("{url}{path}")).send_json(&body).unwrap();
        r.body_mut().read_to_string().unwrap()
    };
    assert_eq!(raw("/v1/probe"), raw("/v1/probe"));
    assert_eq!(raw("/v1/generate"), raw("/v1/generate"));
}

#[test]
fn capability_and_protocol_errors() {
    let servers = Servers::new();
    let url = servers.spawn_backend(synthetic(BackendKind::Reasoning));
    let client = wire(&url, BackendKind::Reasoning);
    assert!(!client.advertise().unwrap().probe_capable);
    assert!(matches!(client.probe(&GenerateRequest::new("x", 8)), Err(BackendError::Capability { .. })));
    assert!(client.generate(&GenerateRequest::new("x", 8)).is_ok());

    // A server whose probe disagrees with its card.
    let lying = Router::new()
        .route("/v1/card", get(|| async { Json(json!({ "model_name": "m", "layers": 2, "dim": 3, "probe_capable": true })) }))
        .route(
            "/v1/probe",
            post(|| async {
                Json(json!({ "text": "", "prompt_tokens": 1, "completion_tokens": 1, "truncated": false, "layers": [[0.0, 1.0, 2.0]] }))
            }),
        )
        .route("/v1/generate", post(|| async { Json(json!({ "text": "a" })) }));
    let client = wire(&format!("http://{}", servers.spawn(lying)), BackendKind::General);
    assert!(matches!(client.probe(&GenerateRequest::new("x", 8)), Err(BackendError::Protocol { .. })));
    assert!(matches!(client.generate(&GenerateRequest::new("x", 8)), Err(BackendError::Protocol { .. })));

    // Generation-only server without a card route.
    let bare = Router::new().route(
        "/v1/generate",
        post(|| async { Json(json!({ "text": "ok", "prompt_tokens": 1, "completion_tokens": 50, "truncated": false })) }),
    );
    let client = wire(&format!("http://{}", servers.spawn(bare)), BackendKind::Reasoning);
    assert!(!client.advertise().unwrap().probe_capable);
    // over budget
    assert!(matches!(client.generate(&GenerateRequest::new("x", 8)), Err(BackendError::Protocol { .. })));
    assert!(client.generate(&GenerateRequest::new("x", 64)).is_ok());

    // 5xx is a retryable transport error.
    let failing = Router::new().route(
        "/v1/generate",
        post(|| async { (axum::http::StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "error": "busy" }))) }),
    );
    let client = wire(&format!("http://{}", servers.spawn(failing)), BackendKind::Reasoning);
    let err = client.generate(&GenerateRequest::new("x", 8)).unwrap_err();
    assert!(err.is_retryable(), "{err}");
}
