//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use seals_core::store::{build_seed, EmbeddingDataset, LabeledSet, SeedSpec};
use seals_core::synthetic::{generate, SyntheticSpec};

/// Synthetic corpus with the default concept layout at `n` rows.
pub fn corpus(n: usize, d: usize) -> Arc<EmbeddingDataset> {
    let spec = SyntheticSpec {
        n,
        d,
        ..SyntheticSpec::default()
    };
    Arc::new(generate(&spec, 0).expect("fixture corpus"))
}

/// The usual 5 + 95 seed for the first concept.
pub fn seed(dataset: &EmbeddingDataset) -> LabeledSet {
    build_seed(dataset, &SeedSpec::new(SyntheticSpec::concept_name(0), 1)).expect("fixture seed")
}
