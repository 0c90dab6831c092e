//! Batch subcommands: experiment runs, concept structure, the geometry
//! simulator and synthetic corpus export.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use seals_core::experiment::{
    load_source, per_concept_ap, plan_cells, run_cells, summary_report, CellResult, ConfigError, DatasetSource,
    ExperimentConfig, ExperimentError, Workspace,
};
use seals_core::graph::{analyze_concept, write_structure_csv, ConceptStructure, GraphError};
use seals_core::metrics::StrategySummary;
use seals_core::store::{save_dataset, EmbeddingDataset, StoreError};
use seals_core::synthetic::{generate, SyntheticSpec};
use seals_core::theory::{run_modified_seals, GeometryInstance, TheoryError, Trace, Variant};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variable naming the dataset root.
pub const DATA_DIR_ENV: &str = "SEALS_DATA_DIR";

/// Manifest looked up under the data root when a config names no dataset.
pub const DEFAULT_MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error("invalid JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl CliError {
    /// Schema problems exit with 2, everything else with 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Experiment(ExperimentError::Config(_)) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A parsed config together with the places its relative paths resolve
/// against.
#[derive(Clone, Debug)]
pub struct Inputs {
    pub config: ExperimentConfig,
    pub config_dir: PathBuf,
    pub data_dir: Option<PathBuf>,
}

impl Inputs {
    pub fn load(config_path: &Path, data_dir: Option<PathBuf>) -> Result<Self, CliError> {
        let text = fs::read_to_string(config_path).map_err(io_err(config_path))?;
        let config = ExperimentConfig::from_json(&text)?;
        let config_dir = config_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self {
            config,
            config_dir,
            data_dir,
        })
    }

    /// Relative paths are looked up next to the config first, then under
    /// the data root.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            return p.to_path_buf();
        }
        let local = self.config_dir.join(p);
        match &self.data_dir {
            Some(root) if !local.exists() => root.join(p),
            _ => local,
        }
    }

    fn source(&self, s: &DatasetSource) -> DatasetSource {
        match s {
            DatasetSource::Manifest(p) => DatasetSource::Manifest(self.resolve(p)),
            other => other.clone(),
        }
    }

    fn synthetic(&self) -> Option<&SyntheticSpec> {
        match &self.config.dataset {
            Some(DatasetSource::Synthetic(s)) => Some(s),
            _ => None,
        }
    }

    fn dataset_source(&self) -> Result<DatasetSource, CliError> {
        match (&self.config.dataset, &self.data_dir) {
            (Some(s), _) => Ok(self.source(s)),
            (None, Some(root)) => Ok(DatasetSource::Manifest(root.join(DEFAULT_MANIFEST))),
            (None, None) => Err(CliError::Input(format!(
                "config names no dataset and {DATA_DIR_ENV} is not set"
            ))),
        }
    }

    pub fn dataset(&self) -> Result<EmbeddingDataset, CliError> {
        Ok(load_source(&self.dataset_source()?, Path::new(""), self.synthetic())?)
    }

    pub fn workspace(&self) -> Result<Workspace, CliError> {
        let dataset = Arc::new(self.dataset()?);
        let eval = match &self.config.eval {
            Some(e) => Some(Arc::new(load_source(&self.source(e), Path::new(""), self.synthetic())?)),
            None => None,
        };
        Workspace::new(dataset, eval, &self.config.index).map_err(|e| ExperimentError::from(e).into())
    }

    /// The configured concepts, or every concept of the dataset.
    pub fn concepts(&self, dataset: &EmbeddingDataset) -> Result<Vec<String>, CliError> {
        match &self.config.concepts {
            Some(list) => {
                for c in list {
                    if dataset.concept_labels(c).is_none() {
                        return Err(StoreError::UnknownConcept(c.clone()).into());
                    }
                }
                Ok(list.clone())
            }
            None => Ok(dataset.concepts().map(String::from).collect()),
        }
    }
}

/// Summary row written to `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    #[serde(flatten)]
    pub summary: StrategySummary,
    pub per_concept_ap: BTreeMap<String, f64>,
}

pub struct RunReport {
    pub results: Vec<CellResult>,
    pub summary: BTreeMap<String, SummaryRow>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Runs every cell, writing `<out>/<experiment>.jsonl` and
/// `<out>/summary.json`. Finished cells are kept under `checkpoint` (default
/// `<out>/checkpoints`) and are not rerun.
pub fn cmd_run(inputs: &Inputs, out: &Path, checkpoint: Option<&Path>) -> Result<RunReport, CliError> {
    let cfg = &inputs.config;
    let exps = cfg.experiments()?;
    if exps.is_empty() {
        return Err(ConfigError::Schema("no strategies configured".into()).into());
    }
    let ws = inputs.workspace()?;
    let concepts = inputs.concepts(&ws.dataset)?;
    let cells = plan_cells(cfg, &concepts)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let checkpoint = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| out.join("checkpoints"));
    log::info!(
        "{} cells over {} concepts, {} rows",
        cells.len(),
        concepts.len(),
        ws.dataset.len()
    );
    let results = run_cells(cfg, &ws, &cells, Some(&checkpoint))?;

    for (i, exp) in exps.iter().enumerate() {
        let mut buf = Vec::new();
        for r in results.iter().filter(|r| r.cell.experiment == i) {
            for line in r.lines() {
                serde_json::to_writer(&mut buf, &line).expect("result line serializes");
                buf.push(b'\n');
            }
        }
        write_atomic(&out.join(format!("{}.jsonl", exp.name)), &buf)?;
    }

    let summary: BTreeMap<String, SummaryRow> = summary_report(&exps, &results)
        .into_iter()
        .map(|(name, summary)| {
            let i = exps.iter().position(|e| e.name == name).expect("summary names come from exps");
            let mine: Vec<&CellResult> = results.iter().filter(|r| r.cell.experiment == i).collect();
            let row = SummaryRow {
                summary,
                per_concept_ap: per_concept_ap(&mine),
            };
            (name, row)
        })
        .collect();
    let text = serde_json::to_vec_pretty(&summary).expect("summary serializes");
    write_atomic(&out.join("summary.json"), &text)?;
    Ok(RunReport { results, summary })
}

/// Writes `<out>/structure.csv` with one row per configured concept.
pub fn cmd_analyze_graph(inputs: &Inputs, out: &Path) -> Result<Vec<ConceptStructure>, CliError> {
    let ds = inputs.dataset()?;
    let concepts = inputs.concepts(&ds)?;
    let g = &inputs.config.graph;
    let rows = concepts
        .iter()
        .map(|c| analyze_concept(&ds, c, g.k, &g.index))
        .collect::<Result<Vec<_>, _>>()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let path = out.join("structure.csv");
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    write_structure_csv(std::io::BufWriter::new(file), &rows)?;
    Ok(rows)
}

/// Parameters of one simulator run. Unless `instance` is given, the chain
/// layout is built from `d`, `gamma`, `delta` and `epsilon`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryParams {
    pub d: usize,
    pub gamma: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub variant: Variant,
    pub max_rounds: usize,
    pub instance: Option<GeometryInstance>,
}

impl Default for TheoryParams {
    fn default() -> Self {
        Self {
            d: 2,
            gamma: 1.0,
            delta: 0.05,
            epsilon: 0.01,
            variant: Variant::NnGraph,
            max_rounds: 10_000,
            instance: None,
        }
    }
}

impl TheoryParams {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| CliError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn instance(&self) -> Result<GeometryInstance, CliError> {
        match &self.instance {
            Some(i) => Ok(i.clone()),
            None if self.d < 2 => Err(CliError::Input("theory needs d >= 2".into())),
            None => Ok(GeometryInstance::chains(self.d, self.gamma, self.delta, self.epsilon)),
        }
    }
}

/// Runs the simulator and writes the trace CSV to `out`.
pub fn cmd_theory<W: Write>(params: &TheoryParams, out: W) -> Result<Trace, CliError> {
    let inst = params.instance()?;
    let trace = run_modified_seals(&inst, &params.variant, params.max_rounds)?;
    trace.write_csv(out)?;
    Ok(trace)
}

/// Generates a synthetic split and saves it as `<out>/<stem>.json` plus its
/// data files.
pub fn cmd_synth(spec: &SyntheticSpec, split: u64, out: &Path, stem: &str) -> Result<PathBuf, CliError> {
    let ds = generate(spec, split)?;
    Ok(save_dataset(&ds, out, stem)?)
}
