//! Active learning and active search over precomputed embeddings, with the
//! candidate pool restricted to nearest neighbors of the labeled set.

pub mod classifier;
pub mod engine;
pub mod experiment;
pub mod graph;
pub mod index;
pub mod metrics;
pub mod pool;
pub mod rng;
pub mod store;
pub mod strategies;
pub mod synthetic;
pub mod theory;

pub use classifier::{predict_proba, train, ClassifierModel, TrainConfig};
pub use engine::{
    run_baseline, run_seals, Engine, EngineError, EvalSplit, Labeler, LabelerError, OracleLabeler, PoolMode,
    ReplayLabeler, RoundRecord, RunOutcome, RunSpec,
};
pub use index::{build_exact, build_lsh, CachedIndex, KnnIndex, KnnQueryResult, LshParams, Neighbor};
pub use metrics::{average_precision, per_concept_correlation, recall_curve};
pub use pool::CandidatePool;
pub use store::{build_seed, load_dataset, save_dataset, EmbeddingDataset, Label, LabeledSet, RowSet, SeedSpec};
pub use strategies::{SimCache, StrategyKind};
