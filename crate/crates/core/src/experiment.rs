//! Experiment configuration and the runner over (experiment, concept,
//! repetition) cells, plus the per-round results lines and summary rows.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::TrainConfig;
use crate::engine::{Engine, EngineError, EvalSplit, OracleLabeler, PoolMode, RoundRecord, RunOutcome, RunSpec};
use crate::graph::GraphIndex;
use crate::index::{build_exact, build_lsh, CachedIndex, IndexError, KnnIndex, LshParams};
use crate::metrics::{mean_std, StrategySummary};
use crate::rng::{derive_seed, hash_str};
use crate::store::{build_seed, EmbeddingDataset, Label, LabeledSet, SeedSpec, StoreError};
use crate::strategies::StrategyKind;
use crate::synthetic::SyntheticSpec;

pub const SCHEMA_VERSION: u32 = 1;

const STREAM_SEED_SET: u64 = 1;
const STREAM_RUN: u64 = 2;
const STREAM_RANDOM: u64 = 3;
const CACHE_SLACK: usize = 32;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config schema: {0}")]
    Schema(String),
    #[error("config is not valid JSON for this schema: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("{cell}: {source}")]
    Engine {
        cell: String,
        #[source]
        source: EngineError,
    },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

/// Where a dataset comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Manifest(PathBuf),
    Synthetic(SyntheticSpec),
    /// Another draw of the synthetic dataset's distribution; eval only.
    SyntheticSplit(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub num_positives: usize,
    pub negative_ratio: usize,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self {
            num_positives: 5,
            negative_ratio: 19,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum IndexConfig {
    #[default]
    Exact,
    Lsh(LshParams),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub k: usize,
    pub index: GraphIndex,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            k: 10,
            index: GraphIndex::Exact,
        }
    }
}

/// Settings of the human labeling service.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    /// How long a request for the next item waits on the engine.
    pub next_timeout_ms: u64,
    /// Directory of static assets served at `/`.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            next_timeout_ms: 30_000,
            static_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: Option<DatasetSource>,
    #[serde(default)]
    pub eval: Option<DatasetSource>,
    /// All concepts of the dataset when absent.
    #[serde(default)]
    pub concepts: Option<Vec<String>>,
    /// Names of the form `<strategy>-<mode>`, e.g. `MaxEnt-SEALS`.
    #[serde(default)]
    pub strategies: Vec<String>,
    #[serde(default = "defaults::k")]
    pub k: usize,
    #[serde(default = "defaults::pool_fraction")]
    pub pool_fraction: f64,
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::budget")]
    pub budget: usize,
    #[serde(default = "defaults::repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub seed: SeedConfig,
    #[serde(default)]
    pub index: IndexConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Record wall-clock timings. Off makes results files reproducible
    /// byte for byte.
    #[serde(default = "defaults::timings")]
    pub timings: bool,
    #[serde(default)]
    pub graph: GraphConfig,
    #[serde(default)]
    pub serve: ServeConfig,
}

mod defaults {
    pub fn k() -> usize {
        100
    }
    pub fn pool_fraction() -> f64 {
        0.05
    }
    pub fn beta() -> f64 {
        1.0
    }
    pub fn batch_size() -> usize {
        100
    }
    pub fn budget() -> usize {
        2000
    }
    pub fn repetitions() -> usize {
        5
    }
    pub fn timings() -> bool {
        true
    }
}

impl ExperimentConfig {
    /// A config with every default and the given dataset.
    pub fn new(dataset: DatasetSource) -> Self {
        let mut cfg: Self = serde_json::from_str(r#"{"schema_version": 1}"#).expect("defaults parse");
        cfg.dataset = Some(dataset);
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(ConfigError::Schema(format!("unsupported schema_version {v}"))),
            None => return Err(ConfigError::Schema("missing schema_version".into())),
        }
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Schema(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.pool_fraction > 0.0 && self.pool_fraction <= 1.0) {
            return bad(format!("pool_fraction {} outside (0, 1]", self.pool_fraction));
        }
        if !self.beta.is_finite() {
            return bad("beta must be finite".into());
        }
        if self.seed.num_positives == 0 {
            return bad("seed.num_positives must be at least 1".into());
        }
        let seed_size = self.seed.num_positives * (1 + self.seed.negative_ratio);
        if self.budget < seed_size {
            return bad(format!("budget {} below seed size {seed_size}", self.budget));
        }
        if matches!(self.dataset, Some(DatasetSource::SyntheticSplit(_))) {
            return bad("synthetic_split is only valid for eval".into());
        }
        if matches!(self.eval, Some(DatasetSource::SyntheticSplit(_)))
            && !matches!(self.dataset, Some(DatasetSource::Synthetic(_)))
        {
            return bad("eval synthetic_split needs a synthetic dataset".into());
        }
        self.experiments()?;
        Ok(())
    }

    pub fn experiments(&self) -> Result<Vec<ExperimentSpec>, ConfigError> {
        self.strategies
            .iter()
            .map(|name| ExperimentSpec::parse(name, self.k, self.pool_fraction, self.beta))
            .collect()
    }

    pub fn seed_spec(&self, concept: &str, rep: usize) -> SeedSpec {
        SeedSpec {
            concept: concept.to_string(),
            num_positives: self.seed.num_positives,
            negative_ratio: self.seed.negative_ratio,
            rng_seed: derive_seed(self.rng_seed, &[hash_str(concept), rep as u64, STREAM_SEED_SET]),
        }
    }

    /// Engine settings for one cell. Seeds depend on (concept, rep) only, so
    /// every experiment of a cell starts from the same seed set.
    pub fn run_spec(&self, exp: &ExperimentSpec, concept: &str, rep: usize) -> RunSpec {
        let cell = [hash_str(concept), rep as u64];
        let strategy = match exp.strategy {
            StrategyKind::Random { .. } => StrategyKind::Random {
                rng_seed: derive_seed(self.rng_seed, &[cell[0], cell[1], STREAM_RANDOM]),
            },
            ref other => other.clone(),
        };
        RunSpec {
            strategy,
            mode: exp.mode,
            batch_size: self.batch_size,
            budget: self.budget,
            train: self.train,
            rng_seed: derive_seed(self.rng_seed, &[cell[0], cell[1], STREAM_RUN]),
            record_timings: self.timings,
        }
    }
}

/// One named strategy/mode pairing.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub strategy: StrategyKind,
    pub mode: PoolMode,
}

impl ExperimentSpec {
    pub fn parse(name: &str, k: usize, pool_fraction: f64, beta: f64) -> Result<Self, ConfigError> {
        let (s, m) = name
            .split_once('-')
            .ok_or_else(|| ConfigError::Schema(format!("strategy {name:?} is not <strategy>-<mode>")))?;
        let strategy = match s {
            "MaxEnt" => StrategyKind::MaxEnt,
            "MLP" => StrategyKind::Mlp,
            "ID" => StrategyKind::InfoDensity { beta },
            "Random" => StrategyKind::Random { rng_seed: 0 },
            other => return Err(ConfigError::Schema(format!("unknown strategy {other:?}"))),
        };
        let mode = match m {
            "All" => PoolMode::All,
            "SEALS" => PoolMode::Seals { k },
            "RandPool" => PoolMode::RandPool { pool_fraction },
            other => return Err(ConfigError::Schema(format!("unknown mode {other:?}"))),
        };
        Ok(Self {
            name: name.to_string(),
            strategy,
            mode,
        })
    }
}

/// One JSON Lines row of a results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultLine {
    pub concept: String,
    pub rep: usize,
    pub round: usize,
    pub labeled: usize,
    pub positives: usize,
    pub pool_size: usize,
    pub pool_frac: f64,
    pub ap: Option<f64>,
    pub t_select_s: f64,
    pub t_knn_s: f64,
    pub t_train_s: f64,
}

impl ResultLine {
    pub fn new(concept: &str, rep: usize, r: &RoundRecord) -> Self {
        Self {
            concept: concept.to_string(),
            rep,
            round: r.round_index,
            labeled: r.labeled_count,
            positives: r.positives_found,
            pool_size: r.pool_size,
            pool_frac: r.pool_fraction,
            ap: r.average_precision,
            t_select_s: r.selection_time,
            t_knn_s: r.knn_time,
            t_train_s: r.training_time,
        }
    }
}

/// Datasets and index shared by every cell.
pub struct Workspace {
    pub dataset: Arc<EmbeddingDataset>,
    pub eval: Option<Arc<EmbeddingDataset>>,
    pub index: Arc<dyn KnnIndex>,
}

impl Workspace {
    pub fn new(
        dataset: Arc<EmbeddingDataset>,
        eval: Option<Arc<EmbeddingDataset>>,
        index: &IndexConfig,
    ) -> Result<Self, IndexError> {
        let index: Arc<dyn KnnIndex> = match index {
            IndexConfig::Exact => Arc::new(CachedIndex::new(build_exact(dataset.clone()), CACHE_SLACK)),
            IndexConfig::Lsh(p) => Arc::new(CachedIndex::new(build_lsh(dataset.clone(), p.clone())?, CACHE_SLACK)),
        };
        Ok(Self { dataset, eval, index })
    }

    /// Evaluation labels for `concept`: the eval split if there is one,
    /// otherwise the unlabeled pool itself.
    pub fn eval_for(&self, concept: &str) -> Option<EvalSplit<'_>> {
        let ds = self.eval.as_deref().unwrap_or(&self.dataset);
        EvalSplit::for_concept(ds, concept)
    }
}

/// Generates or loads a dataset. Relative manifest paths resolve against
/// `base`.
pub fn load_source(
    source: &DatasetSource,
    base: &Path,
    synthetic: Option<&SyntheticSpec>,
) -> Result<EmbeddingDataset, ExperimentError> {
    match source {
        DatasetSource::Manifest(p) => Ok(crate::store::load_dataset(&base.join(p))?),
        DatasetSource::Synthetic(spec) => Ok(crate::synthetic::generate(spec, 0)?),
        DatasetSource::SyntheticSplit(split) => {
            let spec = synthetic.ok_or_else(|| ConfigError::Schema("synthetic_split needs a synthetic dataset".into()))?;
            Ok(crate::synthetic::generate(spec, *split)?)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub experiment: usize,
    pub concept: String,
    pub rep: usize,
}

impl Cell {
    fn label(&self, exps: &[ExperimentSpec]) -> String {
        format!("{}/{}/rep{}", exps[self.experiment].name, self.concept, self.rep)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    pub outcome: RunOutcome,
    pub total_positives: usize,
}

impl CellResult {
    pub fn final_record(&self) -> &RoundRecord {
        self.outcome.records.last().expect("every run emits a record")
    }

    pub fn recall(&self) -> f64 {
        self.final_record().positives_found as f64 / self.total_positives.max(1) as f64
    }

    pub fn lines(&self) -> Vec<ResultLine> {
        self.outcome
            .records
            .iter()
            .map(|r| ResultLine::new(&self.cell.concept, self.cell.rep, r))
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct CellCheckpoint {
    fingerprint: u64,
    records: Vec<RoundRecord>,
    labeled: Vec<(usize, Label)>,
}

/// Cells in (experiment, concept, rep) order.
pub fn plan_cells(cfg: &ExperimentConfig, concepts: &[String]) -> Result<Vec<Cell>, ConfigError> {
    let exps = cfg.experiments()?;
    let mut cells = Vec::new();
    for e in 0..exps.len() {
        for c in concepts {
            for rep in 0..cfg.repetitions {
                cells.push(Cell {
                    experiment: e,
                    concept: c.clone(),
                    rep,
                });
            }
        }
    }
    Ok(cells)
}

pub fn run_cell(cfg: &ExperimentConfig, ws: &Workspace, exp: &ExperimentSpec, cell: &Cell) -> Result<CellResult, ExperimentError> {
    let ds = &*ws.dataset;
    let seed = build_seed(ds, &cfg.seed_spec(&cell.concept, cell.rep))?;
    let spec = cfg.run_spec(exp, &cell.concept, cell.rep);
    let mut labeler = OracleLabeler::for_concept(ds, &cell.concept)
        .ok_or_else(|| StoreError::UnknownConcept(cell.concept.clone()))?;
    let mut engine = Engine::new(&spec, ds).with_index(&*ws.index);
    if let Some(e) = ws.eval_for(&cell.concept) {
        engine = engine.with_eval(e);
    }
    let outcome = engine
        .run(seed, &mut labeler, &mut |_| {})
        .map_err(|source| ExperimentError::Engine {
            cell: format!("{}/{}/rep{}", exp.name, cell.concept, cell.rep),
            source,
        })?;
    Ok(CellResult {
        cell: cell.clone(),
        outcome,
        total_positives: ds.positives(&cell.concept)?.len(),
    })
}

fn checkpoint_path(dir: &Path, exps: &[ExperimentSpec], cell: &Cell) -> PathBuf {
    dir.join(&exps[cell.experiment].name)
        .join(format!("{}__rep{}.json", cell.concept, cell.rep))
}

fn read_checkpoint(
    path: &Path,
    fingerprint: u64,
    cell: &Cell,
    total_positives: usize,
) -> Result<Option<CellResult>, ExperimentError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => {
            return Err(ExperimentError::Checkpoint {
                path: path.into(),
                reason: e.to_string(),
            })
        }
    };
    let corrupt = |reason: String| ExperimentError::Checkpoint {
        path: path.into(),
        reason,
    };
    let cp: CellCheckpoint = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    if cp.fingerprint != fingerprint {
        return Err(corrupt("written by a different config".into()));
    }
    if cp.records.is_empty() {
        return Err(corrupt("no records".into()));
    }
    let labeled = LabeledSet::from_entries(cell.concept.clone(), cp.labeled).map_err(|e| corrupt(e.to_string()))?;
    Ok(Some(CellResult {
        cell: cell.clone(),
        outcome: RunOutcome {
            records: cp.records,
            labeled,
        },
        total_positives,
    }))
}

fn write_checkpoint(path: &Path, fingerprint: u64, result: &CellResult) -> Result<(), ExperimentError> {
    let io = |e: std::io::Error| ExperimentError::Checkpoint {
        path: path.into(),
        reason: e.to_string(),
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let cp = CellCheckpoint {
        fingerprint,
        records: result.outcome.records.clone(),
        labeled: result.outcome.labeled.entries().to_vec(),
    };
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec(&cp).expect("checkpoint serializes")).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

/// Hash of the settings that determine a cell's outcome.
pub fn config_fingerprint(cfg: &ExperimentConfig) -> u64 {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    if let Some(obj) = v.as_object_mut() {
        obj.remove("strategies");
        obj.remove("concepts");
        obj.remove("repetitions");
        obj.remove("graph");
        obj.remove("serve");
    }
    hash_str(&v.to_string())
}

/// Runs all cells in parallel, returning results in cell order. With a
/// checkpoint directory, finished cells are read back instead of rerun and
/// newly finished cells are persisted as they complete.
pub fn run_cells(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    cells: &[Cell],
    checkpoint: Option<&Path>,
) -> Result<Vec<CellResult>, ExperimentError> {
    let exps = cfg.experiments()?;
    let fingerprint = config_fingerprint(cfg);
    cells
        .par_iter()
        .map(|cell| {
            let exp = &exps[cell.experiment];
            if let Some(dir) = checkpoint {
                let path = checkpoint_path(dir, &exps, cell);
                let total = ws.dataset.positives(&cell.concept)?.len();
                if let Some(done) = read_checkpoint(&path, fingerprint, cell, total)? {
                    log::debug!("{} restored from checkpoint", cell.label(&exps));
                    return Ok(done);
                }
                let result = run_cell(cfg, ws, exp, cell)?;
                write_checkpoint(&path, fingerprint, &result)?;
                Ok(result)
            } else {
                run_cell(cfg, ws, exp, cell)
            }
        })
        .collect()
}

/// Table row for one experiment: final mAP and recall are averaged over
/// concepts within each repetition, then summarized across repetitions.
pub fn summarize(results: &[&CellResult]) -> StrategySummary {
    let mut by_rep: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut pool = Vec::new();
    for r in results {
        let entry = by_rep.entry(r.cell.rep).or_default();
        if let Some(ap) = r.final_record().average_precision {
            entry.0.push(ap);
        }
        entry.1.push(r.recall());
        pool.push(r.final_record().pool_fraction);
    }
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    let maps: Vec<f64> = by_rep.values().map(|(a, _)| mean(a)).filter(|m| !m.is_nan()).collect();
    let recalls: Vec<f64> = by_rep.values().map(|(_, r)| mean(r)).collect();
    let (map_mean, map_std) = mean_std(&maps);
    let (recall_mean, recall_std) = mean_std(&recalls);
    StrategySummary {
        map_mean,
        map_std,
        recall_mean,
        recall_std,
        pool_frac_mean: mean(&pool),
    }
}

/// Summary rows keyed by experiment name.
pub fn summary_report(exps: &[ExperimentSpec], results: &[CellResult]) -> BTreeMap<String, StrategySummary> {
    exps.iter()
        .enumerate()
        .map(|(i, e)| {
            let mine: Vec<&CellResult> = results.iter().filter(|r| r.cell.experiment == i).collect();
            (e.name.clone(), summarize(&mine))
        })
        .collect()
}

/// Final AP per concept averaged over repetitions.
pub fn per_concept_ap(results: &[&CellResult]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in results {
        if let Some(ap) = r.final_record().average_precision {
            acc.entry(r.cell.concept.clone()).or_default().push(ap);
        }
    }
    acc.into_iter()
        .map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64))
        .collect()
}
