//! Shared domain types plus answer normalization and grading.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One benchmark question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
}

impl Query {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self { id: id.into(), text: text.into(), source: String::new(), gold_answer: None }
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }

    pub fn with_gold(mut self, gold: impl Into<String>) -> Self {
        self.gold_answer = Some(gold.into());
        self
    }

    /// Grades `candidate` against this query's gold answer.
    pub fn grade(&self, candidate: &str) -> Result<Label, GradeError> {
        match self.gold_answer.as_deref() {
            Some(gold) => grade(candidate, gold),
            None => Err(GradeError::MissingGold),
        }
    }
}

/// Output of one generation call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
    /// Set iff the token budget stopped generation.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbeddingError {
    #[error("capability embedding has no layers")]
    NoLayers,
    #[error("layer {layer} has dimension {got}, expected {expected}")]
    RaggedLayers { layer: usize, got: usize, expected: usize },
    #[error("layer {layer} has a non-finite value at index {index}")]
    NonFinite { layer: usize, index: usize },
}

/// Per-layer hidden states of the probe's last token.
///
/// Layers are 1-indexed in every public API; `layers[0]` holds layer 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapabilityEmbedding {
    pub query_id: String,
    layers: Vec<Vec<f32>>,
    /// Layer number of `layers[0]`; 1 unless only a slice of layers was kept.
    #[serde(default = "one")]
    first_layer: usize,
    pub probe_text: String,
    pub probe_tokens: u32,
    /// The probe produced no tokens and the states belong to the last prompt token.
    #[serde(default)]
    pub from_prompt_token: bool,
}

impl CapabilityEmbedding {
    pub fn new(
        query_id: impl Into<String>,
        layers: Vec<Vec<f32>>,
        probe_text: impl Into<String>,
        probe_tokens: u32,
    ) -> Result<Self, EmbeddingError> {
        validate_layers(&layers)?;
        Ok(Self {
            query_id: query_id.into(),
            layers,
            first_layer: 1,
            probe_text: probe_text.into(),
            probe_tokens,
            from_prompt_token: probe_tokens == 0,
        })
    }

    /// Rebuilds an embedding read back from storage.
    pub fn from_parts(
        query_id: impl Into<String>,
        layers: Vec<Vec<f32>>,
        first_layer: usize,
        probe_text: impl Into<String>,
        probe_tokens: u32,
        from_prompt_token: bool,
    ) -> Result<Self, EmbeddingError> {
        validate_layers(&layers)?;
        Ok(Self {
            query_id: query_id.into(),
            layers,
            first_layer: first_layer.max(1),
            probe_text: probe_text.into(),
            probe_tokens,
            from_prompt_token,
        })
    }

    /// Keeps only layer `l`, discarding the rest.
    pub fn retain_layer(mut self, l: usize) -> Option<Self> {
        let kept = self.layer(l)?.to_vec();
        self.layers = vec![kept];
        self.first_layer = l;
        Some(self)
    }

    /// Number of stored layers.
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].len()
    }

    /// Hidden state of layer `l` (1-indexed).
    pub fn layer(&self, l: usize) -> Option<&[f32]> {
        l.checked_sub(self.first_layer).and_then(|i| self.layers.get(i)).map(Vec::as_slice)
    }

    /// Layer numbers present, in order.
    pub fn layer_numbers(&self) -> std::ops::Range<usize> {
        self.first_layer..self.first_layer + self.layers.len()
    }

    pub fn layers(&self) -> &[Vec<f32>] {
        &self.layers
    }
}

fn one() -> usize {
    1
}

pub(crate) fn validate_layers(layers: &[Vec<f32>]) -> Result<(), EmbeddingError> {
    let first = layers.first().ok_or(EmbeddingError::NoLayers)?;
    let expected = first.len();
    for (i, layer) in layers.iter().enumerate() {
        if layer.len() != expected {
            return Err(EmbeddingError::RaggedLayers { layer: i + 1, got: layer.len(), expected });
        }
        if let Some(index) = layer.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite { layer: i + 1, index });
        }
    }
    Ok(())
}

/// Binary correctness label. Positive means the general backend's full
/// short chain-of-thought answer was graded correct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "u8", into = "u8")]
pub struct Label(bool);

impl Label {
    pub const POSITIVE: Label = Label(true);
    pub const NEGATIVE: Label = Label(false);

    pub fn new(solved: bool) -> Self {
        Self(solved)
    }

    pub fn is_positive(self) -> bool {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        if self.0 {
            1.0
        } else {
            0.0
        }
    }
}

impl From<u8> for Label {
    fn from(v: u8) -> Self {
        Self(v != 0)
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> Self {
        u8::from(l.0)
    }
}

/// Difficulty level, 1 (easiest) through 5 (hardest).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Level(u8);

impl Level {
    pub const ALL: [Level; 5] = [Level(1), Level(2), Level(3), Level(4), Level(5)];

    pub fn new(level: u8) -> Option<Self> {
        (1..=5).contains(&level).then_some(Self(level))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Zero-based index for per-level arrays.
    pub fn index(self) -> usize {
        usize::from(self.0 - 1)
    }
}

impl TryFrom<u8> for Level {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Level::new(v).ok_or_else(|| format!("level {v} outside 1..=5"))
    }
}

impl From<Level> for u8 {
    fn from(l: Level) -> Self {
        l.0
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GradeError {
    #[error("query has no gold answer")]
    MissingGold,
}

/// Grades by normalized exact match.
pub fn grade(candidate: &str, gold: &str) -> Result<Label, GradeError> {
    let gold = normalize_answer(gold);
    if gold.is_empty() {
        return Err(GradeError::MissingGold);
    }
    Ok(Label(normalize_answer(candidate) == gold))
}

const TRAILING_PUNCT: &[char] = &['.', ',', ';', ':', '!', '?', '。'];

/// Canonical short form of an answer string.
///
/// Lowercases, extracts the innermost content of the last `\boxed{..}`,
/// keeps the last non-empty line, strips trailing punctuation and then
/// reduces the line to its final numeric or option-letter token when it has
/// one. Idempotent.
pub fn normalize_answer(raw: &str) -> String {
    let lower = raw.to_lowercase();
    let mut s = lower.trim();
    while let Some(inner) = last_boxed(s) {
        s = inner.trim();
    }
    let line = s.lines().map(str::trim).rfind(|l| !l.is_empty()).unwrap_or("");
    let line = line.trim_end_matches(|c: char| TRAILING_PUNCT.contains(&c) || c.is_whitespace());
    let tokens: Vec<&str> = line.split_whitespace().collect();
    let Some(last) = tokens.last() else {
        return String::new();
    };
    let candidate = last
        .trim_start_matches(['(', '['])
        .trim_end_matches(|c: char| c == ')' || c == ']' || TRAILING_PUNCT.contains(&c));
    if let Some(num) = canonical_number(candidate) {
        return num;
    }
    let mut chars = candidate.chars();
    if let (Some(c @ 'a'..='e'), None) = (chars.next(), chars.next()) {
        return c.to_string();
    }
    tokens.join(" ")
}

/// Content of the last balanced `\boxed{...}` group.
fn last_boxed(s: &str) -> Option<&str> {
    const OPEN: &str = "\\boxed{";
    let start = s.rfind(OPEN)? + OPEN.len();
    let mut depth = 1usize;
    for (i, c) in s[start..].char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&s[start..start + i]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Recognizes `-12`, `3.5`, `1,000`, `7/2`; thousands separators are dropped.
fn canonical_number(tok: &str) -> Option<String> {
    if let Some((num, den)) = tok.split_once('/') {
        let (n, d) = (canonical_decimal(num)?, canonical_decimal(den)?);
        if d.starts_with(['-', '+']) {
            return None;
        }
        return Some(format!("{n}/{d}"));
    }
    canonical_decimal(tok)
}

fn canonical_decimal(tok: &str) -> Option<String> {
    let (sign, body) = match tok.strip_prefix(['-', '+']) {
        Some(rest) => (&tok[..1], rest),
        None => ("", tok),
    };
    let (int, frac) = match body.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (body, None),
    };
    if let Some(f) = frac {
        if f.is_empty() || !f.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
    }
    let int = if int.contains(',') {
        let groups: Vec<&str> = int.split(',').collect();
        let head_ok = (1..=3).contains(&groups[0].len());
        let rest_ok = groups[1..].iter().all(|g| g.len() == 3);
        if !head_ok || !rest_ok || !groups.iter().all(|g| g.bytes().all(|b| b.is_ascii_digit())) {
            return None;
        }
        groups.concat()
    } else {
        if int.is_empty() || !int.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        int.to_string()
    };
    Some(match frac {
        Some(f) => format!("{sign}{int}.{f}"),
        None => format!("{sign}{int}"),
    })
}
