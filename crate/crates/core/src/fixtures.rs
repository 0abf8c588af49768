//! Small seeded datasets with known answers.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendKind, BackendSpec, Catalog, CatalogItem, SyntheticBackend, SyntheticBackendConfig};
use crate::dataset::{label_examples, DatasetError, LabeledExample};
use crate::preinference::PreinferenceConfig;
use crate::router::Example;
use crate::seed::{fnv1a, RunSeed};
use crate::types::{Label, Level, Query};

/// Eight points split by `x1 = 0` with margin 1.
pub fn toy_2d() -> Vec<Example> {
    let pos = [[1.0, 0.5], [2.0, -1.0], [1.5, 2.0], [1.0, -2.0]];
    let neg = [[-1.0, 0.5], [-2.0, 1.0], [-1.5, -2.0], [-1.0, 2.0]];
    pos.iter()
        .map(|p| Example::new(p.to_vec(), Label::POSITIVE))
        .chain(neg.iter().map(|p| Example::new(p.to_vec(), Label::NEGATIVE)))
        .collect()
}

/// Labeled probe embeddings from a synthetic general backend whose accuracy
/// is the same on every level, so labels are Bernoulli(`positive_rate`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianFixture {
    pub n: usize,
    pub layers: usize,
    pub dim: usize,
    pub signal_layers: Vec<usize>,
    pub separation: f64,
    pub positive_rate: f64,
    pub seed: RunSeed,
}

impl GaussianFixture {
    /// Separation 4 on layers 5 and 6 of an 8 x 64 embedding, balanced labels.
    pub fn world(n: usize, seed: RunSeed) -> Self {
        Self { n, layers: 8, dim: 64, signal_layers: vec![5, 6], separation: 4.0, positive_rate: 0.5, seed }
    }

    /// Four layers of dim 16 with signal only in layer 3.
    pub fn layer_sweep(seed: RunSeed) -> Self {
        Self { n: 1000, layers: 4, dim: 16, signal_layers: vec![3], separation: 3.0, positive_rate: 0.5, seed }
    }

    pub fn backend_config(&self) -> SyntheticBackendConfig {
        SyntheticBackendConfig {
            model_name: "gaussian-fixture".into(),
            per_level_accuracy: [self.positive_rate; 5],
            embedding_dim: self.dim,
            embedding_layers: self.layers,
            signal_layers: self.signal_layers.clone(),
            class_separation: self.separation,
            seed: self.seed.child("backend"),
            ..SyntheticBackendConfig::general_default()
        }
    }

    pub fn queries(&self) -> (Vec<Query>, Catalog) {
        let mut catalog = Catalog::new();
        let queries = (0..self.n)
            .map(|i| {
                let id = format!("g{i:05}");
                let text = format!("Fixture question {id}.");
                let gold = (fnv1a(id.as_bytes()) % 997).to_string();
                catalog.insert(text.clone(), CatalogItem { key: id.clone(), level: Level::ALL[i % 5], gold: gold.clone() });
                Query::new(id, text).with_gold(gold)
            })
            .collect();
        (queries, catalog)
    }

    pub fn examples(&self) -> Result<Vec<LabeledExample>, DatasetError> {
        let (queries, catalog) = self.queries();
        let cfg = self.backend_config();
        let spec = BackendSpec::synthetic("fixture", BackendKind::General, cfg.clone());
        let backend = SyntheticBackend::new(spec, cfg, Arc::new(catalog))
            .map_err(|e| DatasetError::File { path: "<fixture>".into(), message: e.to_string() })?;
        label_examples(&queries, &backend, &PreinferenceConfig::default(), self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_set_is_separable_with_margin() {
        for e in toy_2d() {
            let x1 = e.features[0];
            assert!(x1.abs() >= 1.0);
            assert_eq!(x1 > 0.0, e.label.is_positive());
        }
    }

    #[test]
    fn gaussian_fixture_shape_and_balance() {
        let ex = GaussianFixture::layer_sweep(RunSeed(1)).examples().unwrap();
        assert_eq!(ex.len(), 1000);
        assert_eq!((ex[0].embedding.num_layers(), ex[0].embedding.dim()), (4, 16));
        let pos = ex.iter().filter(|e| e.label.is_positive()).count();
        // Binomial(1000, 0.5): sd 15.8
        assert!((440..=560).contains(&pos), "{pos}");
    }
}
