//! Selection scores and greedy batch selection.
//!
//! Every strategy scores a pool row given the current model; the batch is the
//! repeated argmax of those scores with ties going to the lower row index.
//! Information density weights entropy by the row's mean cosine similarity to
//! the pool, computed once per row and frozen in a [`SimCache`].

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use rayon::prelude::*;
use thiserror::Error;

use crate::classifier::ClassifierModel;
use crate::pool::CandidatePool;
use crate::rng::{derive_seed, unit_f64};
use crate::store::EmbeddingDataset;

#[derive(Debug, Error, PartialEq)]
pub enum StrategyError {
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("zero vector has no cosine similarity")]
    ZeroVector,
    #[error("strategy requires a trained model")]
    MissingModel,
    #[error("row {0} is not in the candidate pool")]
    NotInPool(usize),
    #[error("candidate pool is empty")]
    EmptyPool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StrategyKind {
    MaxEnt,
    Mlp,
    InfoDensity { beta: f64 },
    Random { rng_seed: u64 },
}

impl StrategyKind {
    pub fn info_density() -> Self {
        StrategyKind::InfoDensity { beta: 1.0 }
    }

    pub fn needs_model(&self) -> bool {
        !matches!(self, StrategyKind::Random { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::MaxEnt => "MaxEnt",
            StrategyKind::Mlp => "MLP",
            StrategyKind::InfoDensity { .. } => "ID",
            StrategyKind::Random { .. } => "Random",
        }
    }
}

/// Binary entropy in nats with `0 ln 0 = 0`.
pub fn entropy(p: f64) -> Result<f64, StrategyError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(StrategyError::BadProbability(p));
    }
    Ok(binary_entropy(p))
}

#[inline]
fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.ln() };
    term(p) + term(1.0 - p)
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_sim(a: &[f32], b: &[f32]) -> Result<f64, StrategyError> {
    let (mut ab, mut aa, mut bb) = (0f64, 0f64, 0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(StrategyError::ZeroVector);
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

/// Mean cosine similarity of `row` to every pool member, itself included,
/// summed in ascending row order.
pub fn mean_similarity(dataset: &EmbeddingDataset, row: usize, pool: &CandidatePool) -> Result<f64, StrategyError> {
    if pool.is_empty() {
        return Err(StrategyError::EmptyPool);
    }
    let z = dataset.row(row);
    let mut sum = 0.0;
    for p in pool.iter() {
        sum += cosine_sim(z, dataset.row(p))?;
    }
    Ok(sum / pool.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CachedSim {
    pub avg_sim: f64,
    pub pool_size_at_compute: usize,
}

/// Frozen per-row mean similarities plus a count of pairwise similarity
/// evaluations spent filling it.
#[derive(Clone, Debug, Default)]
pub struct SimCache {
    entries: HashMap<usize, CachedSim>,
    pair_evals: u64,
}

impl SimCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, row: usize) -> Option<CachedSim> {
        self.entries.get(&row).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pair_evals(&self) -> u64 {
        self.pair_evals
    }

    /// Returns the cached mean, computing it against `pool` if absent.
    pub fn ensure(&mut self, dataset: &EmbeddingDataset, row: usize, pool: &CandidatePool) -> Result<f64, StrategyError> {
        if let Some(c) = self.entries.get(&row) {
            return Ok(c.avg_sim);
        }
        let avg = mean_similarity(dataset, row, pool)?;
        self.pair_evals += pool.len() as u64;
        self.entries.insert(
            row,
            CachedSim {
                avg_sim: avg,
                pool_size_at_compute: pool.len(),
            },
        );
        Ok(avg)
    }

    /// Fills every missing row against the same `pool`, in parallel.
    pub fn ensure_all(&mut self, dataset: &EmbeddingDataset, rows: &[usize], pool: &CandidatePool) -> Result<(), StrategyError> {
        let missing: Vec<usize> = rows.iter().copied().filter(|r| !self.entries.contains_key(r)).collect();
        let computed: Result<Vec<f64>, _> = missing
            .par_iter()
            .map(|&r| mean_similarity(dataset, r, pool))
            .collect();
        for (row, avg) in missing.iter().zip(computed?) {
            self.pair_evals += pool.len() as u64;
            self.entries.insert(
                *row,
                CachedSim {
                    avg_sim: avg,
                    pool_size_at_compute: pool.len(),
                },
            );
        }
        Ok(())
    }
}

/// Scores pool rows for one strategy and one fixed model.
pub struct Scorer<'a> {
    pub kind: &'a StrategyKind,
    pub model: Option<&'a ClassifierModel>,
    pub dataset: &'a EmbeddingDataset,
}

impl<'a> Scorer<'a> {
    pub fn new(kind: &'a StrategyKind, model: Option<&'a ClassifierModel>, dataset: &'a EmbeddingDataset) -> Self {
        Self { kind, model, dataset }
    }

    fn model(&self) -> Result<&ClassifierModel, StrategyError> {
        self.model.ok_or(StrategyError::MissingModel)
    }

    /// Score from an already-known mean similarity (ignored unless ID).
    fn score_with(&self, row: usize, avg_sim: f64) -> Result<f64, StrategyError> {
        let v = self.dataset.row(row);
        Ok(match self.kind {
            StrategyKind::MaxEnt => binary_entropy(self.model()?.proba(v)),
            StrategyKind::Mlp => self.model()?.proba(v),
            StrategyKind::InfoDensity { beta } => {
                let h = binary_entropy(self.model()?.proba(v));
                if *beta == 0.0 {
                    h
                } else {
                    // sign-preserving power keeps negative means ordered
                    h * avg_sim.signum() * avg_sim.abs().powf(*beta)
                }
            }
            StrategyKind::Random { rng_seed } => unit_f64(derive_seed(*rng_seed, &[row as u64])),
        })
    }

    pub fn score(&self, row: usize, pool: &CandidatePool, cache: &mut SimCache) -> Result<f64, StrategyError> {
        if !pool.contains(row) {
            return Err(StrategyError::NotInPool(row));
        }
        if self.kind.needs_model() {
            self.model()?;
        }
        let avg = match self.kind {
            StrategyKind::InfoDensity { .. } => cache.ensure(self.dataset, row, pool)?,
            _ => 0.0,
        };
        self.score_with(row, avg)
    }

    /// Scores many rows, all measured against the same pool state. Output is
    /// in input order regardless of thread scheduling.
    pub fn score_many(&self, rows: &[usize], pool: &CandidatePool, cache: &mut SimCache) -> Result<Vec<f64>, StrategyError> {
        if self.kind.needs_model() {
            self.model()?;
        }
        if let Some(r) = rows.iter().find(|r| !pool.contains(**r)) {
            return Err(StrategyError::NotInPool(*r));
        }
        let cache_ref = if matches!(self.kind, StrategyKind::InfoDensity { .. }) {
            cache.ensure_all(self.dataset, rows, pool)?;
            Some(&*cache)
        } else {
            None
        };
        rows.par_iter()
            .map(|&r| {
                let avg = cache_ref.and_then(|c| c.get(r)).map(|c| c.avg_sim).unwrap_or(0.0);
                self.score_with(r, avg)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct Scored {
    score: f64,
    row: usize,
}

impl PartialEq for Scored {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scored {}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scored {
    /// Higher score first, then lower row.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score.total_cmp(&other.score).then(other.row.cmp(&self.row))
    }
}

/// Max-heap of scored rows yielding the argmax with the lower-row tie rule.
#[derive(Debug, Default)]
pub struct BatchSelector {
    heap: BinaryHeap<Scored>,
}

impl BatchSelector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_scores(rows: &[usize], scores: &[f64]) -> Self {
        let heap = rows
            .iter()
            .zip(scores)
            .map(|(&row, &score)| Scored { score, row })
            .collect();
        Self { heap }
    }

    pub fn push(&mut self, row: usize, score: f64) {
        self.heap.push(Scored { score, row });
    }

    pub fn pop(&mut self) -> Option<(usize, f64)> {
        self.heap.pop().map(|s| (s.row, s.score))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// Greedy batch: the argmax is taken `b` times, each pick leaving the pool.
/// The model is not retrained inside a batch.
pub fn select_batch(
    scorer: &Scorer,
    pool: &mut CandidatePool,
    cache: &mut SimCache,
    b: usize,
) -> Result<Vec<usize>, StrategyError> {
    if pool.is_empty() {
        return Err(StrategyError::EmptyPool);
    }
    let rows: Vec<usize> = pool.iter().collect();
    let scores = scorer.score_many(&rows, pool, cache)?;
    let mut selector = BatchSelector::from_scores(&rows, &scores);
    let mut picked = Vec::with_capacity(b.min(rows.len()));
    while picked.len() < b {
        match selector.pop() {
            Some((row, _)) => {
                pool.remove(row);
                picked.push(row);
            }
            None => break,
        }
    }
    Ok(picked)
}
