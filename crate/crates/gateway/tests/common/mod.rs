#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use selfroute::router::{self, TrainConfig};
use selfroute::simulator::{make_world, WorldSpec};
use selfroute::{Backend, RouterModel, RunSeed};
use selfroute_gateway::config::GatewayConfig;
use selfroute_gateway::protocol::backend_router;
use selfroute_gateway::server::{app, spawn_local, startup_with, AppState};
use serde_json::Value;

/// A tokio runtime that owns background servers for a blocking test.
pub struct Servers {
    pub rt: tokio::runtime::Runtime,
}

impl Servers {
    pub fn new() -> Self {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build().unwrap();
        Self { rt }
    }

    pub fn spawn(&self, router: axum::Router) -> SocketAddr {
        let (addr, _handle) = self.rt.block_on(spawn_local(router)).unwrap();
        addr
    }

    pub fn spawn_backend(&self, backend: Arc<dyn Backend>) -> String {
        format!("http://{}", self.spawn(backend_router(backend)))
    }

    pub fn spawn_gateway(&self, state: Arc<AppState>) -> String {
        format!("http://{}", self.spawn(app(state)))
    }
}

/// A router trained on a small synthetic world for the default general backend.
pub fn trained_router() -> RouterModel {
    let world = make_world(&WorldSpec { n_per_level: 60, seed: RunSeed(99), ..WorldSpec::default() }).unwrap();
    router::train(&world.labeled_examples(), 5, &TrainConfig::default()).unwrap().model
}

pub fn synthetic_state(cfg: &GatewayConfig, router: RouterModel) -> Arc<AppState> {
    let general = cfg.general.build().unwrap();
    let reasoning = cfg.reasoning.build().unwrap();
    startup_with(cfg, router, general, reasoning).unwrap()
}

pub fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

/// Returns (status, body).
pub fn post(agent: &ureq::Agent, url: &str, body: &Value) -> (u16, Value) {
    let mut resp = agent.post(url).send_json(body).unwrap();
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().unwrap();
    (status, serde_json::from_str(&text).unwrap_or(Value::String(text)))
}

pub fn get(agent: &ureq::Agent, url: &str) -> (u16, Value) {
    let mut resp = agent.get(url).call().unwrap();
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().unwrap();
    (status, serde_json::from_str(&text).unwrap_or(Value::String(text)))
}

pub fn schema_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../schemas")
}

pub fn validator(name: &str) -> jsonschema::Validator {
    let path = schema_dir().join(format!("{name}.schema.json"));
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}

#[derive(Debug, Default)]
pub struct E2eReport {
    pub requests: usize,
    pub failed_requests: usize,
    pub path_mismatches: usize,
    pub ledger_mismatches: usize,
    pub stats_mismatches: usize,
}

impl E2eReport {
    pub fn mismatches(&self) -> usize {
        self.failed_requests + self.path_mismatches + self.ledger_mismatches + self.stats_mismatches
    }
}

/// Sends `n` routed requests from `clients` threads with a mix of threshold
/// overrides and checks every response and the final counters.
pub fn run_e2e(base: &str, n: usize, clients: usize, default_threshold: f64) -> E2eReport {
    let thresholds = [None, Some(0.2), Some(0.5), Some(0.8), Some(1.0), Some(0.0)];
    let responses: Vec<(u16, Value, f64)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..clients)
            .map(|c| {
                s.spawn(move || {
                    let http = agent();
                    (c..n)
                        .step_by(clients)
                        .map(|i| {
                            let t = thresholds[i % thresholds.len()];
                            let mut body = serde_json::json!({ "question": format!("Gateway question {i}: what is {i} + {}?", i % 7) });
                            if let Some(t) = t {
                                body["threshold"] = t.into();
                            }
                            let (status, v) = post(&http, &format!("{base}/v1/route"), &body);
                            (status, v, t.unwrap_or(default_threshold))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    let mut r = E2eReport { requests: responses.len(), ..E2eReport::default() };
    let (mut short, mut long, mut probe, mut completion) = (0u64, 0u64, 0u64, 0u64);
    for (status, v, t) in &responses {
        if *status != 200 {
            r.failed_requests += 1;
            continue;
        }
        let p = v["probability"].as_f64().unwrap();
        let expect = selfroute::decide(p, *t).unwrap();
        let path: selfroute::Path = serde_json::from_value(v["path"].clone()).unwrap();
        if path != expect || v["threshold"].as_f64() != Some(*t) {
            r.path_mismatches += 1;
        }
        let tok = &v["tokens"];
        let (pr, pt, c, total) = (
            tok["probe"].as_u64().unwrap(),
            tok["prompt"].as_u64().unwrap(),
            tok["completion"].as_u64().unwrap(),
            tok["total"].as_u64().unwrap(),
        );
        if total != pr + pt + c {
            r.ledger_mismatches += 1;
        }
        match path {
            selfroute::Path::Short => short += 1,
            selfroute::Path::Long => long += 1,
        }
        probe += pr;
        completion += c;
    }
    let (_, stats) = get(&agent(), &format!("{base}/v1/stats"));
    let served = stats["requests"].as_u64().unwrap();
    let checks = [
        stats["short_count"].as_u64().unwrap() + stats["long_count"].as_u64().unwrap() == served,
        served == short + long,
        stats["short_count"].as_u64() == Some(short),
        stats["long_count"].as_u64() == Some(long),
        stats["total_probe_tokens"].as_u64() == Some(probe),
        stats["total_completion_tokens"].as_u64() == Some(completion),
        stats["errors"].as_u64() == Some(r.failed_requests as u64),
    ];
    r.stats_mismatches = checks.iter().filter(|ok| !**ok).count();
    r
}

pub fn bin() -> std::process::Command {
    std::process::Command::new(env!("CARGO_BIN_EXE_selfroute"))
}

/// Writes `n` arithmetic queries with gold answers over two sources.
pub fn write_queries(path: &std::path::Path, n: usize) {
    let lines: Vec<String> = (0..n)
        .map(|i| {
            let source = if i % 2 == 0 { "gsm" } else { "math" };
            serde_json::json!({ "id": format!("q{i}"), "text": format!("Problem {i}: compute {i}*3."), "source": source, "gold_answer": (i * 3).to_string() })
                .to_string()
        })
        .collect();
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

pub const PIPELINE: &[(&str, &[&str])] = &[
    ("build-dataset", &["build-dataset", "--queries", "q.jsonl", "--out", "grad.json", "--records", "rec.jsonl", "--quota", "20"]),
    ("collect-embeddings", &["collect-embeddings", "--queries", "q.jsonl", "--out", "train.jsonl"]),
    ("train-router", &["train-router", "--examples", "train.jsonl", "--out", "router.json"]),
    ("sweep-layers", &["sweep-layers", "--examples", "train.jsonl"]),
    ("evaluate", &["evaluate", "--queries", "q.jsonl", "--router", "router.json", "--results", "res.jsonl"]),
    ("simulate", &["simulate", "--n-per-level", "40", "--csv", "levels.csv"]),
    ("serve", &["serve", "--check", "--config", "gateway.json"]),
];

pub const PIPELINE_FILES: &[&str] =
    &["grad.json", "rec.jsonl", "train.jsonl", "train.emb", "router.json", "res.jsonl", "levels.csv"];

/// One pipeline run: per subcommand (name, exit code, stdout), and the bytes
/// of every output file.
pub struct PipelineRun {
    pub steps: Vec<(&'static str, Option<i32>, Vec<u8>)>,
    pub files: Vec<(&'static str, Vec<u8>)>,
}

/// Runs every subcommand once with `--seed seed --json` in a fresh directory.
pub fn run_pipeline(seed: u64, n_queries: usize) -> PipelineRun {
    let dir = tempfile::tempdir().unwrap();
    write_queries(&dir.path().join("q.jsonl"), n_queries);
    let cfg = GatewayConfig { router_path: "router.json".into(), ..GatewayConfig::default() };
    std::fs::write(dir.path().join("gateway.json"), cfg.to_json()).unwrap();
    let seed = seed.to_string();
    let steps = PIPELINE
        .iter()
        .map(|(name, args)| {
            let out = bin().current_dir(dir.path()).args(*args).args(["--seed", &seed, "--json"]).output().unwrap();
            (*name, out.status.code(), out.stdout)
        })
        .collect();
    let files = PIPELINE_FILES.iter().map(|f| (*f, std::fs::read(dir.path().join(f)).unwrap_or_default())).collect();
    PipelineRun { steps, files }
}
