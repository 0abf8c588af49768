//! Difficulty estimation and difficulty-gradient datasets.
//!
//! A question's difficulty for a model is `D = 1 - A`, where `A` is the
//! fraction of `k` independent short chain-of-thought attempts graded
//! correct. Difficulties are bucketed into five levels and a gradient dataset
//! samples each level up to a quota, round-robin across source tags.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{with_retries, Backend, BackendError, GenerateRequest};
use rayon::prelude::*;
use crate::preinference::{collect_embedding, PreinferenceConfig, PreinferenceError};
use crate::seed::RunSeed;
use crate::types::{CapabilityEmbedding, GradeError, Label, Level, Query};

/// Default number of attempts per question when estimating accuracy.
pub const DEFAULT_TRIALS: usize = 8;

/// Upper (exclusive) difficulty bounds of levels 1-4; level 5 is `[0.70, 1.0]`.
pub const LEVEL_BOUNDARIES: [f64; 4] = [0.125, 0.30, 0.50, 0.70];

/// Extra attempts for transport failures before a record is unusable.
pub const DEFAULT_RETRIES: u32 = 2;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("query {query_id} has no gold answer")]
    MissingGold { query_id: String },
    #[error("query {query_id} unusable: {source}")]
    Unusable { query_id: String, source: BackendError },
    #[error("query {query_id}: {source}")]
    Probe { query_id: String, source: PreinferenceError },
    #[error("difficulty {0} outside [0, 1]")]
    Domain(f64),
    #[error("trial count must be at least 1")]
    NoTrials,
    #[error("level {0} has no candidate records")]
    EmptyLevel(Level),
    #[error("duplicate query id {0}")]
    DuplicateId(String),
    #[error("label and embedding refer to different queries ({label} vs {embedding})")]
    MismatchedExample { label: String, embedding: String },
    #[error("{path}: {message}")]
    File { path: String, message: String },
}

fn file_err(path: &Path, e: impl std::fmt::Display) -> DatasetError {
    DatasetError::File { path: path.display().to_string(), message: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRecord {
    pub query_id: String,
    #[serde(default)]
    pub source: String,
    pub model_name: String,
    pub trials: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub difficulty: f64,
    pub level: Level,
}

impl DifficultyRecord {
    pub fn new(
        query_id: impl Into<String>,
        source: impl Into<String>,
        model_name: impl Into<String>,
        trials: usize,
        correct: usize,
    ) -> Result<Self, DatasetError> {
        if trials == 0 {
            return Err(DatasetError::NoTrials);
        }
        let accuracy = correct.min(trials) as f64 / trials as f64;
        let difficulty = 1.0 - accuracy;
        Ok(Self {
            query_id: query_id.into(),
            source: source.into(),
            model_name: model_name.into(),
            trials,
            correct: correct.min(trials),
            accuracy,
            difficulty,
            level: assign_level(difficulty)?,
        })
    }
}

/// Maps a difficulty in `[0, 1]` onto levels 1-5 with half-open buckets.
pub fn assign_level(difficulty: f64) -> Result<Level, DatasetError> {
    if !(0.0..=1.0).contains(&difficulty) {
        return Err(DatasetError::Domain(difficulty));
    }
    let level = 1 + LEVEL_BOUNDARIES.iter().filter(|&&b| difficulty >= b).count() as u8;
    Ok(Level::new(level).expect("at most 4 boundaries"))
}

/// Request seed of trial `trial` for `query_id`.
pub fn trial_seed(seed: RunSeed, query_id: &str, trial: usize) -> u64 {
    seed.child(query_id).child_u64(trial as u64 + 1).0
}

/// Request seed shared by the solvability label and the probe of `query_id`.
pub fn request_seed(seed: RunSeed, query_id: &str) -> u64 {
    seed.child(query_id).0
}

fn grade_attempt(query: &Query, backend: &dyn Backend, max_tokens: u32, request_seed: u64) -> Result<Label, DatasetError> {
    let request = GenerateRequest::new(query.text.clone(), max_tokens).with_seed(request_seed);
    let result = with_retries(DEFAULT_RETRIES, || backend.generate(&request))
        .map_err(|source| DatasetError::Unusable { query_id: query.id.clone(), source })?;
    query.grade(&result.text).map_err(|GradeError::MissingGold| DatasetError::MissingGold {
        query_id: query.id.clone(),
    })
}

fn require_gold(query: &Query) -> Result<(), DatasetError> {
    match query.gold_answer.as_deref().map(str::trim) {
        Some(g) if !g.is_empty() => Ok(()),
        _ => Err(DatasetError::MissingGold { query_id: query.id.clone() }),
    }
}

/// Estimates `A` from `k` full short chain-of-thought attempts.
pub fn estimate_accuracy(
    query: &Query,
    backend: &dyn Backend,
    k: usize,
    seed: RunSeed,
) -> Result<DifficultyRecord, DatasetError> {
    require_gold(query)?;
    if k == 0 {
        return Err(DatasetError::NoTrials);
    }
    let mut correct = 0;
    for trial in 0..k {
        let label = grade_attempt(query, backend, backend.default_max_tokens(), trial_seed(seed, &query.id, trial))?;
        correct += usize::from(label.is_positive());
    }
    let model = backend.advertise().map(|c| c.model_name).unwrap_or_else(|_| backend.name().to_string());
    DifficultyRecord::new(query.id.clone(), query.source.clone(), model, k, correct)
}

/// Estimates every query concurrently; per-query results keep input order.
pub fn estimate_all(
    queries: &[Query],
    backend: &dyn Backend,
    k: usize,
    seed: RunSeed,
) -> Vec<Result<DifficultyRecord, DatasetError>> {
    queries.par_iter().map(|q| estimate_accuracy(q, backend, k, seed)).collect()
}

/// One full-length generation, graded.
pub fn label_solvable(query: &Query, backend: &dyn Backend, seed: RunSeed) -> Result<Label, DatasetError> {
    require_gold(query)?;
    grade_attempt(query, backend, backend.default_max_tokens(), request_seed(seed, &query.id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientDataset {
    pub quota_per_level: usize,
    pub levels: BTreeMap<Level, Vec<DifficultyRecord>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl GradientDataset {
    pub fn len(&self) -> usize {
        self.levels.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> impl Iterator<Item = &DifficultyRecord> {
        self.levels.values().flatten()
    }

    pub fn level_counts(&self) -> BTreeMap<Level, usize> {
        self.levels.iter().map(|(l, v)| (*l, v.len())).collect()
    }

    pub fn mean_difficulty(&self, level: Level) -> Option<f64> {
        let v = self.levels.get(&level)?;
        (!v.is_empty()).then(|| v.iter().map(|r| r.difficulty).sum::<f64>() / v.len() as f64)
    }
}

/// Samples up to `quota_per_level` records per level without replacement.
///
/// Within a level, sources are visited round-robin in lexical order of their
/// tags, and each source's records are drawn in a seeded uniform order. The
/// result depends only on the set of records and the seed.
pub fn build_gradient(
    records: &[DifficultyRecord],
    quota_per_level: usize,
    seed: RunSeed,
) -> Result<GradientDataset, DatasetError> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.query_id.as_str()) {
            return Err(DatasetError::DuplicateId(r.query_id.clone()));
        }
    }
    let mut by_level: BTreeMap<Level, BTreeMap<&str, Vec<&DifficultyRecord>>> = BTreeMap::new();
    for r in records {
        by_level.entry(r.level).or_default().entry(r.source.as_str()).or_default().push(r);
    }
    let mut levels = BTreeMap::new();
    let mut warnings = Vec::new();
    for level in Level::ALL {
        let sources = by_level.remove(&level).ok_or(DatasetError::EmptyLevel(level))?;
        let mut queues: Vec<std::vec::IntoIter<&DifficultyRecord>> = sources
            .into_iter()
            .map(|(source, mut recs)| {
                recs.sort_by(|a, b| a.query_id.cmp(&b.query_id));
                recs.shuffle(&mut seed.child("gradient").child_u64(u64::from(level.get())).child(source).rng());
                recs.into_iter()
            })
            .collect();
        let mut picked = Vec::with_capacity(quota_per_level);
        'fill: while picked.len() < quota_per_level {
            let mut progressed = false;
            for q in queues.iter_mut() {
                if picked.len() == quota_per_level {
                    break 'fill;
                }
                if let Some(r) = q.next() {
                    picked.push(r.clone());
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
        if picked.len() < quota_per_level {
            let msg = format!("level {level}: only {} of {quota_per_level} records available", picked.len());
            tracing::warn!("{msg}");
            warnings.push(msg);
        }
        levels.insert(level, picked);
    }
    Ok(GradientDataset { quota_per_level, levels, warnings })
}

/// A capability embedding paired with its solvability label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub query_id: String,
    pub source: String,
    pub embedding: CapabilityEmbedding,
    pub label: Label,
}

impl LabeledExample {
    pub fn new(
        query_id: impl Into<String>,
        embedding: CapabilityEmbedding,
        label: Label,
    ) -> Result<Self, DatasetError> {
        let query_id = query_id.into();
        if embedding.query_id != query_id {
            return Err(DatasetError::MismatchedExample { label: query_id, embedding: embedding.query_id });
        }
        Ok(Self { query_id, source: String::new(), embedding, label })
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }
}

/// Probes and labels one query with the same request seed on the same
/// general backend.
pub fn label_example(
    query: &Query,
    backend: &dyn Backend,
    preinference: &PreinferenceConfig,
    seed: RunSeed,
) -> Result<LabeledExample, DatasetError> {
    let label = label_solvable(query, backend, seed)?;
    let embedding = collect_embedding(query, backend, preinference, request_seed(seed, &query.id))
        .map_err(|source| DatasetError::Probe { query_id: query.id.clone(), source })?;
    Ok(LabeledExample::new(query.id.clone(), embedding, label)?.with_source(query.source.clone()))
}

pub fn label_examples(
    queries: &[Query],
    backend: &dyn Backend,
    preinference: &PreinferenceConfig,
    seed: RunSeed,
) -> Result<Vec<LabeledExample>, DatasetError> {
    queries.par_iter().map(|q| label_example(q, backend, preinference, seed)).collect()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let file = File::open(path).map_err(|e| file_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| file_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| file_err(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(|e| file_err(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|e| file_err(path, e))?;
        w.write_all(b"\n").map_err(|e| file_err(path, e))?;
    }
    w.flush().map_err(|e| file_err(path, e))
}

pub fn read_queries(path: &Path) -> Result<Vec<Query>, DatasetError> {
    let queries: Vec<Query> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for q in &queries {
        if !seen.insert(q.id.as_str()) {
            return Err(DatasetError::DuplicateId(q.id.clone()));
        }
    }
    Ok(queries)
}

/// One JSONL row of a labeled-example file. The hidden states live in the
/// sibling `.emb` file in the same row order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ExampleRow {
    query_id: String,
    #[serde(default)]
    source: String,
    label: Label,
    probe_tokens: u32,
    probe_text: String,
    #[serde(default)]
    from_prompt_token: bool,
}

/// Header line of an `.emb` file; `count * layers * dim` little-endian f32
/// values follow the newline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingHeader {
    pub count: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    pub d: usize,
    #[serde(default = "first_layer_default")]
    pub first_layer: usize,
}

fn first_layer_default() -> usize {
    1
}

/// Path of the embedding file that accompanies a labeled-example JSONL file.
pub fn embedding_path(jsonl: &Path) -> PathBuf {
    jsonl.with_extension("emb")
}

pub fn write_labeled(jsonl: &Path, examples: &[LabeledExample]) -> Result<(), DatasetError> {
    write_jsonl(
        jsonl,
        examples.iter().map(|e| ExampleRow {
            query_id: e.query_id.clone(),
            source: e.source.clone(),
            label: e.label,
            probe_tokens: e.embedding.probe_tokens,
            probe_text: e.embedding.probe_text.clone(),
            from_prompt_token: e.embedding.from_prompt_token,
        }),
    )?;
    let path = embedding_path(jsonl);
    let (layers, d, first_layer) = examples
        .first()
        .map_or((0, 0, 1), |e| (e.embedding.num_layers(), e.embedding.dim(), e.embedding.layer_numbers().start));
    let header = EmbeddingHeader { count: examples.len(), layers, d, first_layer };
    let file = File::create(&path).map_err(|e| file_err(&path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &header).map_err(|e| file_err(&path, e))?;
    w.write_all(b"\n").map_err(|e| file_err(&path, e))?;
    for e in examples {
        if e.embedding.num_layers() != layers || e.embedding.dim() != d {
            return Err(file_err(&path, format!("example {} has a different embedding shape", e.query_id)));
        }
        for v in e.embedding.layers().iter().flatten() {
            w.write_all(&v.to_le_bytes()).map_err(|e| file_err(&path, e))?;
        }
    }
    w.flush().map_err(|e| file_err(&path, e))
}

pub fn read_labeled(jsonl: &Path) -> Result<Vec<LabeledExample>, DatasetError> {
    let rows: Vec<ExampleRow> = read_jsonl(jsonl)?;
    let path = embedding_path(jsonl);
    let mut r = BufReader::new(File::open(&path).map_err(|e| file_err(&path, e))?);
    let mut header_line = String::new();
    r.read_line(&mut header_line).map_err(|e| file_err(&path, e))?;
    let header: EmbeddingHeader = serde_json::from_str(header_line.trim_end()).map_err(|e| file_err(&path, e))?;
    if header.count != rows.len() {
        return Err(file_err(&path, format!("header count {} but {} JSONL rows", header.count, rows.len())));
    }
    let mut buf = vec![0u8; header.layers * header.d * 4];
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        r.read_exact(&mut buf).map_err(|e| file_err(&path, e))?;
        let mut values = buf.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        let layers: Vec<Vec<f32>> = (0..header.layers).map(|_| values.by_ref().take(header.d).collect()).collect();
        let embedding = CapabilityEmbedding::from_parts(
            row.query_id.clone(),
            layers,
            header.first_layer,
            row.probe_text,
            row.probe_tokens,
            row.from_prompt_token,
        )
        .map_err(|e| file_err(&path, format!("{}: {e}", row.query_id)))?;
        out.push(LabeledExample::new(row.query_id, embedding, row.label)?.with_source(row.source));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| file_err(&path, e))?;
    if !rest.is_empty() {
        return Err(file_err(&path, format!("{} trailing bytes", rest.len())));
    }
    Ok(out)
}
