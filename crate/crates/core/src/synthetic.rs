//! Synthetic rare-concept corpus: a uniform background on the unit sphere
//! with a handful of concepts, each a tight Gaussian cluster around a random
//! direction mixed with uniformly scattered members.

use std::collections::BTreeMap;

use bitvec::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::derive_seed;
use crate::store::{normalize_rows, EmbeddingDataset, StoreError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    pub num_concepts: usize,
    pub prevalence: f64,
    /// Per-coordinate standard deviation around the concept center.
    pub sigma: f64,
    /// Share of each concept's positives drawn from the clustered component.
    pub cluster_share: f64,
    pub rng_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 100_000,
            d: 32,
            num_concepts: 20,
            prevalence: 0.005,
            sigma: 0.15,
            cluster_share: 0.8,
            rng_seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn positives_per_concept(&self) -> usize {
        (self.prevalence * self.n as f64).round() as usize
    }

    pub fn concept_name(i: usize) -> String {
        format!("concept_{i:02}")
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Concept centers depend only on `(rng_seed, num_concepts, d)`, so two
/// splits generated with different `split` values share the same concepts.
pub fn concept_centers(spec: &SyntheticSpec) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.rng_seed, &[0xCE47]));
    (0..spec.num_concepts).map(|_| unit_gaussian(&mut rng, spec.d)).collect()
}

/// Generates one split. `split` selects an independent draw from the same
/// distribution (0 for the unlabeled pool, 1 for evaluation, ...).
pub fn generate(spec: &SyntheticSpec, split: u64) -> Result<EmbeddingDataset, StoreError> {
    let (n, d) = (spec.n, spec.d);
    let per = spec.positives_per_concept();
    if per * spec.num_concepts > n {
        return Err(StoreError::Shape(format!(
            "{} concepts of {per} rows do not fit in {n} rows",
            spec.num_concepts
        )));
    }
    let centers = concept_centers(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.rng_seed, &[0x5B17, split]));

    // assign concept membership to a random permutation of the rows
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for (c, chunk) in order.chunks(per.max(1)).take(spec.num_concepts).enumerate() {
        for &row in chunk {
            owner[row] = Some(c);
        }
    }

    let mut vectors = Vec::with_capacity(n * d);
    for row_owner in &owner {
        match row_owner {
            Some(c) if rng.gen::<f64>() < spec.cluster_share => {
                for &x in &centers[*c] {
                    let noise: f64 = rng.sample(StandardNormal);
                    vectors.push(x + (spec.sigma * noise) as f32);
                }
            }
            _ => vectors.extend(unit_gaussian(&mut rng, d)),
        }
    }
    normalize_rows(&mut vectors, d)?;

    let mut labels = BTreeMap::new();
    for c in 0..spec.num_concepts {
        let bits: BitVec = owner.iter().map(|o| *o == Some(c)).collect();
        labels.insert(SyntheticSpec::concept_name(c), bits);
    }
    let prefix = if split == 0 { "u" } else { "e" };
    let ids = (0..n).map(|i| format!("{prefix}{split}-{i:07}")).collect();
    EmbeddingDataset::new(d, vectors, ids, labels)
}
