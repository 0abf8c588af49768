//! Command-line interface. Every subcommand returns its rendered output so it
//! can be driven in-process as well as from the binary.

use std::collections::BTreeMap;
use std::path::{Path as FsPath, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use selfroute::backend::{Catalog, CatalogItem, GenerateRequest};
use selfroute::dataset::{self, request_seed, DatasetError, DifficultyRecord, LabeledExample, DEFAULT_TRIALS};
use selfroute::fixtures::GaussianFixture;
use selfroute::policy::{render_table, report, score_outcomes, DatasetScore, EvalReport, RoutePolicyConfig, SelfRoute};
use selfroute::router::{self, evaluate_router, SweepReport};
use selfroute::seed::fnv1a;
use selfroute::simulator::{simulate, SimulationConfig, WorldSpec};
use selfroute::{Backend, BackendSpec, Level, Query, RouterModel, RunSeed, TrainConfig};

use crate::config::GatewayConfig;
use crate::error::CliError;
use crate::server;

#[derive(Debug, Parser)]
#[command(name = "selfroute", version, about = "Capability-aware routing between short and long chain-of-thought backends")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Base seed for every stochastic step (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Gateway configuration JSON file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Emit machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate per-query difficulty and sample a leveled gradient dataset.
    BuildDataset(BuildDatasetArgs),
    /// Probe and label queries with the general backend.
    CollectEmbeddings(CollectArgs),
    /// Train a router on one layer of labeled embeddings.
    TrainRouter(TrainRouterArgs),
    /// Train and validate one router per layer.
    SweepLayers(SweepArgs),
    /// Compare general-only, reasoning-only and routed answering on queries.
    Evaluate(EvaluateArgs),
    /// Compare routing policies on a synthetic world.
    Simulate(SimulateArgs),
    /// Run the routing gateway.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    /// Query JSONL ({id, text, source?, gold_answer}).
    #[arg(long)]
    pub queries: PathBuf,
    /// Output path of the gradient dataset JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write every difficulty record to this JSONL file.
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    pub trials: usize,
    /// Records sampled per level.
    #[arg(long, default_value_t = 100)]
    pub quota: usize,
}

#[derive(Debug, Args)]
pub struct CollectArgs {
    #[arg(long)]
    pub queries: PathBuf,
    /// Output JSONL; embeddings go to the sibling `.emb` file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long = "lr", default_value_t = 1e-4)]
    pub learning_rate: f64,
    /// Standardize features with training-set statistics.
    #[arg(long)]
    pub standardize: bool,
}

impl TrainArgs {
    fn config(&self, seed: RunSeed) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
            standardize: self.standardize,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainRouterArgs {
    /// Labeled examples written by `collect-embeddings`.
    #[arg(long)]
    pub examples: PathBuf,
    /// Layer to train on; defaults to the best layer of a validation sweep.
    #[arg(long)]
    pub layer: Option<usize>,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    /// Output router file (defaults to the config's router_path).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Labeled examples; without this the built-in four-layer fixture is used.
    #[arg(long)]
    pub examples: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub queries: PathBuf,
    /// Router file (defaults to the config's router_path).
    #[arg(long)]
    pub router: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Per-query routed results JSONL.
    #[arg(long)]
    pub results: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 500)]
    pub n_per_level: usize,
    /// Class separation of the general backend's embeddings.
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Router layer; defaults to the best layer of a sweep.
    #[arg(long)]
    pub layer: Option<usize>,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Write per-level results as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Run startup checks, print the startup summary and exit.
    #[arg(long)]
    pub check: bool,
}

/// What a subcommand produced: text for humans and a JSON value.
pub struct Output {
    pub text: String,
    pub json: serde_json::Value,
}

impl Output {
    fn new(text: String, value: impl Serialize) -> Self {
        Self { text, json: serde_json::to_value(value).expect("output serializes") }
    }

    pub fn render(&self, json: bool) -> String {
        if json {
            serde_json::to_string_pretty(&self.json).expect("json value") + "\n"
        } else if self.text.ends_with('\n') {
            self.text.clone()
        } else {
            format!("{}\n", self.text)
        }
    }
}

pub struct Context {
    pub config: GatewayConfig,
    pub seed: RunSeed,
}

impl Context {
    pub fn from_common(common: &Common) -> Result<Self, CliError> {
        let config = GatewayConfig::resolve(common.config.as_deref())?;
        let seed = common.seed.map(RunSeed).unwrap_or(config.seed);
        Ok(Self { config, seed })
    }
}

fn stage<E: std::fmt::Display>(name: &'static str) -> impl Fn(E) -> CliError {
    move |e| CliError::new(name, e)
}

/// Level a synthetic backend assigns to a question it has not been told about.
fn hashed_level(text: &str) -> Level {
    Level::new(1 + (fnv1a(text.as_bytes()) % 5) as u8).expect("1..=5")
}

/// Teaches synthetic backends the gold answers of `queries`.
pub fn catalog_for(queries: &[Query]) -> Catalog {
    let mut catalog = Catalog::new();
    for q in queries {
        if let Some(gold) = &q.gold_answer {
            catalog.insert(
                q.text.clone(),
                CatalogItem { key: q.id.clone(), level: hashed_level(&q.text), gold: gold.clone() },
            );
        }
    }
    catalog
}

fn build_backend(spec: &BackendSpec, catalog: &Arc<Catalog>, stage_name: &'static str) -> Result<Arc<dyn Backend>, CliError> {
    spec.build_with_catalog(catalog.clone()).map_err(stage(stage_name))
}

pub fn run(cli: &Cli) -> Result<Output, CliError> {
    let ctx = Context::from_common(&cli.common)?;
    match &cli.command {
        Command::BuildDataset(a) => build_dataset(&ctx, a),
        Command::CollectEmbeddings(a) => collect_embeddings(&ctx, a),
        Command::TrainRouter(a) => train_router(&ctx, a),
        Command::SweepLayers(a) => sweep_layers(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Simulate(a) => simulate_cmd(&ctx, a),
        Command::Serve(a) => serve(&ctx, a),
    }
}

fn display(p: &FsPath) -> String {
    p.display().to_string()
}

pub fn build_dataset(ctx: &Context, a: &BuildDatasetArgs) -> Result<Output, CliError> {
    let queries = dataset::read_queries(&a.queries).map_err(stage("build-dataset"))?;
    let catalog = Arc::new(catalog_for(&queries));
    let general = build_backend(&ctx.config.general, &catalog, "build-dataset")?;
    let results = dataset::estimate_all(&queries, general.as_ref(), a.trials, ctx.seed.child("difficulty"));
    let mut records: Vec<DifficultyRecord> = Vec::with_capacity(results.len());
    let mut unusable = Vec::new();
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e @ (DatasetError::Unusable { .. } | DatasetError::MissingGold { .. })) => {
                tracing::warn!(error = %e, "skipping query");
                unusable.push(e.to_string());
            }
            Err(e) => return Err(CliError::new("build-dataset", e)),
        }
    }
    if let Some(path) = &a.records {
        dataset::write_jsonl(path, &records).map_err(stage("build-dataset"))?;
    }
    let gradient = dataset::build_gradient(&records, a.quota, ctx.seed.child("gradient")).map_err(stage("build-dataset"))?;
    let body = serde_json::to_string_pretty(&gradient).expect("gradient serializes") + "\n";
    std::fs::write(&a.out, body).map_err(|e| CliError::new("build-dataset", format!("{}: {e}", a.out.display())))?;

    let levels: BTreeMap<String, serde_json::Value> = Level::ALL
        .iter()
        .map(|&l| {
            (
                l.to_string(),
                json!({ "count": gradient.levels[&l].len(), "mean_difficulty": gradient.mean_difficulty(l) }),
            )
        })
        .collect();
    let mut text = format!(
        "estimated {} of {} queries with {} trials each ({} unusable)\nlevel  count  mean D\n",
        records.len(),
        queries.len(),
        a.trials,
        unusable.len()
    );
    for &l in &Level::ALL {
        let d = gradient.mean_difficulty(l).map_or("-".to_string(), |d| format!("{d:.3}"));
        text.push_str(&format!("{l:>5}  {:>5}  {d:>6}\n", gradient.levels[&l].len()));
    }
    for w in &gradient.warnings {
        text.push_str(&format!("warning: {w}\n"));
    }
    text.push_str(&format!("wrote {}", a.out.display()));
    Ok(Output::new(
        text,
        json!({
            "queries": queries.len(),
            "usable": records.len(),
            "unusable": unusable,
            "trials": a.trials,
            "quota_per_level": a.quota,
            "levels": levels,
            "warnings": gradient.warnings,
            "out": display(&a.out),
        }),
    ))
}

pub fn collect_embeddings(ctx: &Context, a: &CollectArgs) -> Result<Output, CliError> {
    let queries = dataset::read_queries(&a.queries).map_err(stage("collect-embeddings"))?;
    let catalog = Arc::new(catalog_for(&queries));
    let general = build_backend(&ctx.config.general, &catalog, "collect-embeddings")?;
    let examples = dataset::label_examples(&queries, general.as_ref(), &ctx.config.preinference, ctx.seed)
        .map_err(stage("collect-embeddings"))?;
    dataset::write_labeled(&a.out, &examples).map_err(stage("collect-embeddings"))?;
    let positives = examples.iter().filter(|e| e.label.is_positive()).count();
    let (layers, dim) = examples.first().map_or((0, 0), |e| (e.embedding.num_layers(), e.embedding.dim()));
    let mean_probe = examples.iter().map(|e| f64::from(e.embedding.probe_tokens)).sum::<f64>() / examples.len().max(1) as f64;
    let emb = dataset::embedding_path(&a.out);
    Ok(Output::new(
        format!(
            "{} examples ({positives} solvable), {layers} layers x {dim}, mean probe {mean_probe:.1} tokens\nwrote {} and {}",
            examples.len(),
            a.out.display(),
            emb.display()
        ),
        json!({
            "count": examples.len(),
            "positives": positives,
            "layers": layers,
            "dim": dim,
            "mean_probe_tokens": mean_probe,
            "out": display(&a.out),
            "embeddings": display(&emb),
        }),
    ))
}

fn read_examples(path: &FsPath, stage_name: &'static str) -> Result<Vec<LabeledExample>, CliError> {
    dataset::read_labeled(path).map_err(stage(stage_name))
}

pub fn train_router(ctx: &Context, a: &TrainRouterArgs) -> Result<Output, CliError> {
    let examples = read_examples(&a.examples, "train-router")?;
    let cfg = a.train.config(ctx.seed);
    let (layer, swept) = match a.layer {
        Some(l) => (l, false),
        None => (router::sweep_layers(&examples, a.train_fraction, &cfg).map_err(stage("train-router"))?.best_layer, true),
    };
    let outcome = router::train(&examples, layer, &cfg).map_err(stage("train-router"))?;
    let eval = evaluate_router(&outcome.model, &examples).map_err(stage("train-router"))?;
    let out = a.out.clone().unwrap_or_else(|| ctx.config.router_path.clone());
    outcome.model.save(&out).map_err(stage("train-router"))?;
    let trace: Vec<String> = outcome.loss_trace.iter().map(|l| format!("{l:.4}")).collect();
    let mut text = format!(
        "layer {layer}{} dim {}: epochs {} batch {} lr {}\nloss per epoch: {}\ntrain accuracy {:.4} f1 {:.4}\n",
        if swept { " (best of sweep)" } else { "" },
        outcome.model.dim,
        cfg.epochs,
        cfg.batch_size,
        cfg.learning_rate,
        trace.join(" "),
        eval.metrics.accuracy,
        eval.metrics.f1
    );
    for w in &outcome.warnings {
        text.push_str(&format!("warning: {w}\n"));
    }
    text.push_str(&format!("wrote {}", out.display()));
    Ok(Output::new(
        text,
        json!({
            "layer": layer,
            "layer_from_sweep": swept,
            "dim": outcome.model.dim,
            "epochs": cfg.epochs,
            "batch_size": cfg.batch_size,
            "learning_rate": cfg.learning_rate,
            "standardize": cfg.standardize,
            "loss_trace": outcome.loss_trace,
            "train_metrics": eval.metrics,
            "trained_on": outcome.model.trained_on,
            "warnings": outcome.warnings,
            "out": display(&out),
        }),
    ))
}

fn render_sweep(r: &SweepReport) -> String {
    let mut text = format!("train {} / validation {}\nlayer  accuracy  precision  recall      f1\n", r.train_size, r.val_size);
    for l in &r.layers {
        let mark = if l.layer == r.best_layer { " *" } else { "" };
        text.push_str(&format!(
            "{:>5}  {:>8.4}  {:>9.4}  {:>6.4}  {:>6.4}{mark}\n",
            l.layer, l.metrics.accuracy, l.metrics.precision, l.metrics.recall, l.metrics.f1
        ));
    }
    text.push_str(&format!("best layer: {} of {}", r.best_layer, r.layers.len()));
    text
}

pub fn sweep_layers(ctx: &Context, a: &SweepArgs) -> Result<Output, CliError> {
    let examples = match &a.examples {
        Some(p) => read_examples(p, "sweep-layers")?,
        None => GaussianFixture::layer_sweep(ctx.seed).examples().map_err(stage("sweep-layers"))?,
    };
    let report = router::sweep_layers(&examples, a.train_fraction, &a.train.config(ctx.seed)).map_err(stage("sweep-layers"))?;
    Ok(Output::new(render_sweep(&report), &report))
}

fn dataset_name(q: &Query) -> String {
    if q.source.is_empty() {
        "default".into()
    } else {
        q.source.clone()
    }
}

/// Per-dataset accuracy (percent) and mean completion tokens of answering
/// every query directly on `backend`.
fn direct_scores(
    queries: &[Query],
    backend: &dyn Backend,
    seed: RunSeed,
    stage_name: &'static str,
) -> Result<BTreeMap<String, (usize, usize, u64)>, CliError> {
    let mut by_dataset: BTreeMap<String, (usize, usize, u64)> = BTreeMap::new();
    for q in queries {
        let req = GenerateRequest::new(q.text.clone(), backend.default_max_tokens()).with_seed(request_seed(seed, &q.id));
        let r = backend.generate(&req).map_err(stage(stage_name))?;
        let e = by_dataset.entry(dataset_name(q)).or_default();
        e.0 += 1;
        e.1 += usize::from(q.grade(&r.text).map(|l| l.is_positive()).unwrap_or(false));
        e.2 += u64::from(r.completion_tokens);
    }
    Ok(by_dataset)
}

fn to_scores(m: &BTreeMap<String, (usize, usize, u64)>) -> Vec<DatasetScore> {
    m.iter()
        .map(|(name, &(n, c, t))| DatasetScore {
            dataset: name.clone(),
            accuracy: 100.0 * c as f64 / n as f64,
            mean_tokens: t as f64 / n as f64,
        })
        .collect()
}

pub fn evaluate(ctx: &Context, a: &EvaluateArgs) -> Result<Output, CliError> {
    let queries = dataset::read_queries(&a.queries).map_err(stage("evaluate"))?;
    if queries.is_empty() {
        return Err(CliError::new("evaluate", "no queries"));
    }
    let router_path = a.router.clone().unwrap_or_else(|| ctx.config.router_path.clone());
    let router = RouterModel::load(&router_path).map_err(stage("evaluate"))?;
    let catalog = Arc::new(catalog_for(&queries));
    let general = build_backend(&ctx.config.general, &catalog, "evaluate")?;
    let reasoning = build_backend(&ctx.config.reasoning, &catalog, "evaluate")?;

    let short = direct_scores(&queries, general.as_ref(), ctx.seed, "short-answer")?;
    let long = direct_scores(&queries, reasoning.as_ref(), ctx.seed, "long-answer")?;
    let sizes: BTreeMap<String, usize> = short.iter().map(|(k, v)| (k.clone(), v.0)).collect();
    let reference: BTreeMap<String, f64> = to_scores(&long).into_iter().map(|s| (s.dataset, s.mean_tokens)).collect();

    let policy = RoutePolicyConfig {
        route_threshold: a.threshold.unwrap_or(ctx.config.route_threshold),
        router,
        general: ctx.config.general.clone(),
        reasoning: ctx.config.reasoning.clone(),
        preinference: ctx.config.preinference.clone(),
    };
    let pipeline = SelfRoute::with_backends(policy, general, reasoning)?;
    let outcomes = pipeline
        .answer_all(&queries, ctx.seed)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(path) = &a.results {
        dataset::write_jsonl(path, outcomes.iter().map(|o| o.result_row())).map_err(stage("evaluate"))?;
    }
    let mut routed_scores = Vec::new();
    for name in sizes.keys() {
        let subset: Vec<_> = queries
            .iter()
            .zip(&outcomes)
            .filter(|(q, _)| &dataset_name(q) == name)
            .map(|(_, o)| o.clone())
            .collect();
        routed_scores.push(score_outcomes(name, &subset));
    }
    let none = BTreeMap::new();
    let methods: Vec<(String, EvalReport)> = vec![
        ("general".into(), report(&to_scores(&short), &sizes, &none)?),
        ("reasoning".into(), report(&to_scores(&long), &sizes, &none)?),
        ("self-route".into(), report(&routed_scores, &sizes, &reference)?),
    ];
    let short_routed = outcomes.iter().filter(|o| o.ledger.path == selfroute::Path::Short).count();
    let text = format!(
        "{}routed short: {short_routed} of {}",
        render_table(&methods),
        outcomes.len()
    );
    let value = json!({
        "threshold": pipeline.config().route_threshold,
        "router_layer": pipeline.router().layer,
        "routed_short": short_routed,
        "queries": outcomes.len(),
        "methods": methods.iter().map(|(m, r)| json!({ "method": m, "report": r })).collect::<Vec<_>>(),
    });
    Ok(Output::new(text, value))
}

pub fn simulate_cmd(ctx: &Context, a: &SimulateArgs) -> Result<Output, CliError> {
    let mut world = WorldSpec {
        n_per_level: a.n_per_level,
        general: ctx.config.general.synthetic_config(),
        reasoning: ctx.config.reasoning.synthetic_config(),
        preinference: ctx.config.preinference.clone(),
        seed: ctx.seed,
    };
    if let Some(s) = a.separation {
        world = world.with_separation(s);
    }
    let cfg = SimulationConfig {
        world,
        train: a.train.config(ctx.seed),
        layer: a.layer,
        threshold: a.threshold,
        ..SimulationConfig::default()
    };
    let (report, _) = simulate(&cfg).map_err(stage("simulate"))?;
    if let Some(path) = &a.csv {
        std::fs::write(path, report.per_level_csv()).map_err(|e| CliError::new("simulate", format!("{}: {e}", path.display())))?;
    }
    Ok(Output::new(report.render_text(), &report))
}

pub fn serve(ctx: &Context, a: &ServeArgs) -> Result<Output, CliError> {
    let mut cfg = ctx.config.clone();
    cfg.seed = ctx.seed;
    let state = server::startup(&cfg)?;
    let info = state.info().clone();
    let text = format!(
        "router layer {} dim {} from {}\ngeneral {} ({} layers x {}), reasoning {}\nthreshold {} concurrency {}\nlisten {}",
        info.router_layer,
        info.router_dim,
        info.router_path,
        info.general.model_name,
        info.general.layers,
        info.general.dim,
        info.reasoning.model_name,
        info.route_threshold,
        info.concurrency_limit,
        info.listen
    );
    if a.check {
        return Ok(Output::new(text, &info));
    }
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(stage("serve"))?;
    eprintln!("{text}");
    runtime.block_on(server::serve_router(server::app(state), &cfg.listen))?;
    Ok(Output::new("stopped".into(), json!({ "stopped": true })))
}
