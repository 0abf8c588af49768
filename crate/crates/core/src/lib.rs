//! Capability-aware routing between a cheap short chain-of-thought backend
//! and an expensive long chain-of-thought backend.
//!
//! A query is first answered with a short, budget-limited planning probe on
//! the general backend. The hidden states captured at the probe's final
//! decoding step form a capability embedding, and a per-layer linear router
//! maps that embedding to the probability that the general backend answers
//! the query correctly. Queries above the routing threshold stay on the
//! general backend; the rest fall back to the reasoning backend.
//!
//! Module map:
//!
//! - [`types`]: shared domain types, answer normalization and grading
//! - [`seed`]: deterministic RNG derivation
//! - [`backend`]: generation backends (synthetic and HTTP wire client)
//! - [`dataset`]: difficulty estimation and difficulty-gradient datasets
//! - [`preinference`]: probe prompt rendering and embedding capture
//! - [`router`]: the logistic router, training, layer sweeps, metrics
//! - [`policy`]: the routing decision, the answering pipeline, token accounting
//! - [`simulator`]: synthetic worlds and side-by-side policy comparison

pub mod backend;
pub mod dataset;
pub mod fixtures;
pub mod policy;
pub mod preinference;
pub mod router;
pub mod seed;
pub mod simulator;
pub mod types;

pub use backend::{Backend, BackendError, BackendKind, BackendSpec, ModelCard};
pub use policy::{decide, Path, RoutePolicyConfig, TokenLedger};
pub use router::{RouterModel, TrainConfig};
pub use seed::RunSeed;
pub use types::{grade, normalize_answer, CapabilityEmbedding, GenerationResult, Label, Level, Query};
