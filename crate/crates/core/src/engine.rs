//! The selection loops: a global scan over every unlabeled row (optionally a
//! fixed random subset of them) and the nearest-neighbor restricted loop,
//! where the pool starts as the union of the labeled rows' k-NN and grows by
//! the k-NN of every newly labeled row.
//!
//! Each round trains the classifier on the labeled set, records metrics,
//! then greedily selects up to `b` rows with the model held fixed.

use std::collections::VecDeque;
use std::time::Instant;

use bitvec::prelude::*;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{train, ClassifierError, ClassifierModel, TrainConfig};
use crate::index::{IndexError, KnnIndex};
use crate::metrics::average_precision;
use crate::pool::CandidatePool;
use crate::rng::derive_seed;
use crate::store::{EmbeddingDataset, Label, LabeledSet};
use crate::strategies::{BatchSelector, Scorer, SimCache, StrategyError, StrategyKind};

const STREAM_RANDPOOL: u64 = 0x5241_4e44;
const STREAM_FALLBACK: u64 = 0xFA11_BAC4;
const STREAM_RANDOM_SCORES: u64 = 0x5343_4f52;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    All,
    Seals { k: usize },
    RandPool { pool_fraction: f64 },
}

impl PoolMode {
    pub fn name(&self) -> &'static str {
        match self {
            PoolMode::All => "All",
            PoolMode::Seals { .. } => "SEALS",
            PoolMode::RandPool { .. } => "RandPool",
        }
    }
}

/// Settings of a single run for one concept.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub strategy: StrategyKind,
    pub mode: PoolMode,
    pub batch_size: usize,
    pub budget: usize,
    pub train: TrainConfig,
    pub rng_seed: u64,
    /// When false every timing field is recorded as zero.
    pub record_timings: bool,
}

impl RunSpec {
    pub fn new(strategy: StrategyKind, mode: PoolMode) -> Self {
        Self {
            strategy,
            mode,
            batch_size: 100,
            budget: 2000,
            train: TrainConfig::default(),
            rng_seed: 0,
            record_timings: true,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum LabelerError {
    #[error("labeler failed: {0}")]
    Failed(String),
    #[error("timed out waiting for a label")]
    Timeout,
    #[error("labeler closed")]
    Closed,
}

/// Source of labels. May block, e.g. while a human answers.
pub trait Labeler {
    fn label(&mut self, row: usize) -> Result<Label, LabelerError>;
}

/// Answers from hidden ground truth.
pub struct OracleLabeler<'a> {
    truth: &'a BitSlice,
}

impl<'a> OracleLabeler<'a> {
    pub fn new(truth: &'a BitSlice) -> Self {
        Self { truth }
    }

    pub fn for_concept(dataset: &'a EmbeddingDataset, concept: &str) -> Option<Self> {
        dataset.concept_labels(concept).map(|b| Self::new(b.as_bitslice()))
    }
}

impl Labeler for OracleLabeler<'_> {
    fn label(&mut self, row: usize) -> Result<Label, LabelerError> {
        self.truth
            .get(row)
            .map(|b| Label::from_bool(*b))
            .ok_or_else(|| LabelerError::Failed(format!("row {row} has no label")))
    }
}

/// Answers from a recorded log first, then defers to `inner`. A request that
/// disagrees with the log is an error, since the replay has diverged.
pub struct ReplayLabeler<L> {
    log: VecDeque<(usize, Label)>,
    inner: L,
}

impl<L: Labeler> ReplayLabeler<L> {
    pub fn new(log: impl IntoIterator<Item = (usize, Label)>, inner: L) -> Self {
        Self {
            log: log.into_iter().collect(),
            inner,
        }
    }

    pub fn remaining(&self) -> usize {
        self.log.len()
    }
}

impl<L: Labeler> Labeler for ReplayLabeler<L> {
    fn label(&mut self, row: usize) -> Result<Label, LabelerError> {
        match self.log.pop_front() {
            Some((r, l)) if r == row => Ok(l),
            Some((r, _)) => Err(LabelerError::Failed(format!(
                "replay diverged: log has row {r}, engine asked for {row}"
            ))),
            None => self.inner.label(row),
        }
    }
}

impl<T: Labeler + ?Sized> Labeler for &mut T {
    fn label(&mut self, row: usize) -> Result<Label, LabelerError> {
        (**self).label(row)
    }
}

/// Held-out split on which average precision is measured each round.
#[derive(Clone, Copy)]
pub struct EvalSplit<'a> {
    pub dataset: &'a EmbeddingDataset,
    pub labels: &'a BitSlice,
}

impl<'a> EvalSplit<'a> {
    pub fn for_concept(dataset: &'a EmbeddingDataset, concept: &str) -> Option<Self> {
        dataset.concept_labels(concept).map(|b| Self {
            dataset,
            labels: b.as_bitslice(),
        })
    }

    pub fn average_precision(&self, model: &ClassifierModel) -> Option<f64> {
        let d = self.dataset.dim();
        let scores: Vec<f64> = self.dataset.vectors().chunks_exact(d).map(|v| model.proba(v)).collect();
        let labels: Vec<Label> = self.labels.iter().map(|b| Label::from_bool(*b)).collect();
        average_precision(&scores, &labels).ok()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_index: usize,
    pub labeled_count: usize,
    pub positives_found: usize,
    pub pool_size: usize,
    pub pool_fraction: f64,
    pub average_precision: Option<f64>,
    pub selection_time: f64,
    pub knn_time: f64,
    pub training_time: f64,
    /// The pool was empty at round start and rows were drawn at random.
    pub pool_exhausted: bool,
    /// Pairwise similarity evaluations spent this round.
    pub sim_pair_evals: u64,
    /// Score evaluations spent this round.
    pub score_evals: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub records: Vec<RoundRecord>,
    pub labeled: LabeledSet,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("labeler failure after {} labels: {source}", .partial.labeled.len())]
    Labeler {
        #[source]
        source: LabelerError,
        partial: Box<RunOutcome>,
    },
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

impl EngineError {
    pub fn partial(&self) -> Option<&RunOutcome> {
        match self {
            EngineError::Labeler { partial, .. } => Some(partial),
            _ => None,
        }
    }
}

/// Wall-clock accumulator that can be switched off for reproducible output.
struct Stopwatch {
    enabled: bool,
    total: f64,
}

impl Stopwatch {
    fn new(enabled: bool) -> Self {
        Self { enabled, total: 0.0 }
    }

    fn time<T>(&mut self, f: impl FnOnce() -> T) -> T {
        if !self.enabled {
            return f();
        }
        let start = Instant::now();
        let out = f();
        self.total += start.elapsed().as_secs_f64();
        out
    }

    fn take(&mut self) -> f64 {
        std::mem::take(&mut self.total)
    }
}

pub struct Engine<'a> {
    spec: &'a RunSpec,
    dataset: &'a EmbeddingDataset,
    index: Option<&'a dyn KnnIndex>,
    eval: Option<EvalSplit<'a>>,
}

struct RunState<'a> {
    labeled: LabeledSet,
    pool: CandidatePool,
    cache: SimCache,
    records: Vec<RoundRecord>,
    select: Stopwatch,
    knn: Stopwatch,
    train: Stopwatch,
    index: Option<(&'a dyn KnnIndex, usize)>,
}

impl RunState<'_> {
    /// Merges the k-NN of `row` into the pool and returns the rows that were
    /// not already present.
    fn expand(&mut self, row: usize) -> Result<Vec<usize>, EngineError> {
        let Some((index, k)) = self.index else {
            return Ok(Vec::new());
        };
        let labeled = self.labeled.members();
        let result = self.knn.time(|| index.query_row(row, k, labeled))?;
        let added: Vec<usize> = result.rows().filter(|r| self.pool.insert(*r)).collect();
        debug_assert!(self.pool.len() <= k * self.labeled.len());
        Ok(added)
    }

    fn outcome(&self) -> RunOutcome {
        RunOutcome {
            records: self.records.clone(),
            labeled: self.labeled.clone(),
        }
    }
}

impl<'a> Engine<'a> {
    pub fn new(spec: &'a RunSpec, dataset: &'a EmbeddingDataset) -> Self {
        Self {
            spec,
            dataset,
            index: None,
            eval: None,
        }
    }

    pub fn with_index(mut self, index: &'a dyn KnnIndex) -> Self {
        self.index = Some(index);
        self
    }

    pub fn with_eval(mut self, eval: EvalSplit<'a>) -> Self {
        self.eval = Some(eval);
        self
    }

    fn validate(&self, seed: &LabeledSet) -> Result<(), EngineError> {
        let s = self.spec;
        if s.batch_size == 0 {
            return Err(EngineError::Config("batch size must be at least 1".into()));
        }
        if s.budget < seed.len() {
            return Err(EngineError::Config(format!(
                "budget {} is smaller than the seed set ({})",
                s.budget,
                seed.len()
            )));
        }
        if let Some(r) = seed.rows().find(|r| *r >= self.dataset.len()) {
            return Err(EngineError::Config(format!("seed row {r} out of range")));
        }
        match s.mode {
            PoolMode::Seals { k } => {
                if k == 0 {
                    return Err(EngineError::Config("k must be at least 1".into()));
                }
                if self.index.is_none() {
                    return Err(EngineError::Config("nearest-neighbor pool needs an index".into()));
                }
            }
            PoolMode::RandPool { pool_fraction } => {
                if !(pool_fraction > 0.0 && pool_fraction <= 1.0) {
                    return Err(EngineError::Config(format!(
                        "pool_fraction {pool_fraction} outside (0, 1]"
                    )));
                }
            }
            PoolMode::All => {}
        }
        if let StrategyKind::InfoDensity { beta } = s.strategy {
            if !beta.is_finite() {
                return Err(EngineError::Config("beta must be finite".into()));
            }
        }
        Ok(())
    }

    fn initial_pool(&self, state: &mut RunState) -> Result<(), EngineError> {
        let n = self.dataset.len();
        match self.spec.mode {
            PoolMode::All => {
                state.pool = (0..n).filter(|r| !state.labeled.contains(*r)).collect();
            }
            PoolMode::RandPool { pool_fraction } => {
                let unlabeled: Vec<usize> = (0..n).filter(|r| !state.labeled.contains(*r)).collect();
                let m = ((pool_fraction * n as f64).round() as usize).clamp(1, unlabeled.len().max(1));
                let m = m.min(unlabeled.len());
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.spec.rng_seed, &[STREAM_RANDPOOL]));
                state.pool = sample(&mut rng, unlabeled.len(), m).iter().map(|i| unlabeled[i]).collect();
            }
            PoolMode::Seals { .. } => {
                let rows: Vec<usize> = state.labeled.rows().collect();
                for row in rows {
                    state.expand(row)?;
                }
            }
        }
        Ok(())
    }

    /// Runs the loop until the budget is spent or no unlabeled rows remain.
    /// `observer` sees every record as it is produced.
    pub fn run(
        &self,
        seed: LabeledSet,
        labeler: &mut dyn Labeler,
        observer: &mut dyn FnMut(&RoundRecord),
    ) -> Result<RunOutcome, EngineError> {
        self.validate(&seed)?;
        let spec = self.spec;
        let n = self.dataset.len();
        let timings = spec.record_timings;
        let mut state = RunState {
            labeled: seed,
            pool: CandidatePool::new(),
            cache: SimCache::new(),
            records: Vec::new(),
            select: Stopwatch::new(timings),
            knn: Stopwatch::new(timings),
            train: Stopwatch::new(timings),
            index: match spec.mode {
                PoolMode::Seals { k } => self.index.map(|i| (i, k)),
                _ => None,
            },
        };
        self.initial_pool(&mut state)?;

        let mut round = 0usize;
        let mut pool_exhausted = false;
        let mut pair_evals_before = 0u64;
        let mut score_evals = 0u64;
        loop {
            let model = state.train.time(|| train(&state.labeled, self.dataset, &spec.train))?;
            let record = RoundRecord {
                round_index: round,
                labeled_count: state.labeled.len(),
                positives_found: state.labeled.positives(),
                pool_size: state.pool.len(),
                pool_fraction: if n == 0 { 0.0 } else { state.pool.len() as f64 / n as f64 },
                average_precision: self.eval.and_then(|e| e.average_precision(&model)),
                selection_time: state.select.take(),
                knn_time: state.knn.take(),
                training_time: state.train.take(),
                pool_exhausted,
                sim_pair_evals: state.cache.pair_evals() - pair_evals_before,
                score_evals,
            };
            observer(&record);
            state.records.push(record);
            pair_evals_before = state.cache.pair_evals();
            score_evals = 0;

            if state.labeled.len() >= spec.budget || state.labeled.len() >= n {
                break;
            }
            round += 1;
            let want = spec.batch_size.min(spec.budget - state.labeled.len());
            pool_exhausted = state.pool.is_empty();
            if pool_exhausted {
                log::info!("round {round}: candidate pool exhausted, labeling random rows");
                let unlabeled: Vec<usize> = (0..n).filter(|r| !state.labeled.contains(*r)).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.rng_seed, &[STREAM_FALLBACK, round as u64]));
                let picks: Vec<usize> = sample(&mut rng, unlabeled.len(), want.min(unlabeled.len()))
                    .iter()
                    .map(|i| unlabeled[i])
                    .collect();
                for row in picks {
                    self.label_into(&mut state, labeler, row)?;
                    state.expand(row)?;
                }
                continue;
            }

            let strategy = match spec.strategy {
                StrategyKind::Random { rng_seed } => StrategyKind::Random {
                    rng_seed: derive_seed(rng_seed, &[STREAM_RANDOM_SCORES, round as u64]),
                },
                ref other => other.clone(),
            };
            let scorer = Scorer::new(&strategy, Some(&model), self.dataset);
            let mut selector = {
                let (pool, cache) = (&state.pool, &mut state.cache);
                state.select.time(|| -> Result<_, StrategyError> {
                    let rows: Vec<usize> = pool.iter().collect();
                    let scores = scorer.score_many(&rows, pool, cache)?;
                    Ok(BatchSelector::from_scores(&rows, &scores))
                })?
            };
            score_evals += selector.len() as u64;

            let mut taken = 0;
            while taken < want {
                let Some((row, _)) = state.select.time(|| selector.pop()) else {
                    break;
                };
                state.pool.remove(row);
                self.label_into(&mut state, labeler, row)?;
                taken += 1;
                let added = state.expand(row)?;
                if !added.is_empty() {
                    let (pool, cache) = (&state.pool, &mut state.cache);
                    let scores = state.select.time(|| scorer.score_many(&added, pool, cache))?;
                    score_evals += added.len() as u64;
                    for (r, s) in added.iter().zip(scores) {
                        selector.push(*r, s);
                    }
                }
            }
        }
        Ok(state.outcome())
    }

    fn label_into(&self, state: &mut RunState, labeler: &mut dyn Labeler, row: usize) -> Result<(), EngineError> {
        match labeler.label(row) {
            Ok(label) => {
                state
                    .labeled
                    .push(row, label)
                    .map_err(|e| EngineError::Config(e.to_string()))?;
                Ok(())
            }
            Err(source) => Err(EngineError::Labeler {
                source,
                partial: Box::new(state.outcome()),
            }),
        }
    }
}

/// Global scan, over every unlabeled row or a fixed random subset.
pub fn run_baseline(
    spec: &RunSpec,
    dataset: &EmbeddingDataset,
    seed: LabeledSet,
    labeler: &mut dyn Labeler,
    eval: Option<EvalSplit>,
) -> Result<RunOutcome, EngineError> {
    if matches!(spec.mode, PoolMode::Seals { .. }) {
        return Err(EngineError::Config("run_baseline needs mode All or RandPool".into()));
    }
    let mut engine = Engine::new(spec, dataset);
    if let Some(e) = eval {
        engine = engine.with_eval(e);
    }
    engine.run(seed, labeler, &mut |_| {})
}

/// Nearest-neighbor restricted loop.
pub fn run_seals(
    spec: &RunSpec,
    dataset: &EmbeddingDataset,
    seed: LabeledSet,
    labeler: &mut dyn Labeler,
    index: &dyn KnnIndex,
    eval: Option<EvalSplit>,
) -> Result<RunOutcome, EngineError> {
    if !matches!(spec.mode, PoolMode::Seals { .. }) {
        return Err(EngineError::Config("run_seals needs mode SEALS".into()));
    }
    let mut engine = Engine::new(spec, dataset).with_index(index);
    if let Some(e) = eval {
        engine = engine.with_eval(e);
    }
    engine.run(seed, labeler, &mut |_| {})
}
