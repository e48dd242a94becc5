mod experiment;
mod fixtures;
mod metrics;
mod report;
mod sampling;

use thiserror::Error;

pub use experiment::{
    aggregate, expand_path, f1_spread, run_experiment, sweep_prefix_length, CorpusSpec, DirLock, ExperimentDescriptor,
    ExperimentOutcome, ExperimentResult, MetricSummary, SentinelSpec, TrainSection, DEFAULT_STABILITY_THRESHOLD,
    OUTPUT_ROOT_ENV,
};
pub use fixtures::{sentinel_fixture, sentinel_splits, SENTINEL_TOKEN};
pub use metrics::{compute_metrics, ConfusionCounts, MetricsReport, METRIC_NAMES};
pub use report::{emit_report, load_results, sample_count, table_rows, ReportKind, ReportRow};
pub use sampling::{sample_few_shot, FewShotSpec, FEW_SHOT_REFERENCE_SIZE};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("sampling: {0}")]
    Sampling(String),
    #[error("invalid descriptor field `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: String, message: String },
    #[error("experiment directory is locked by another writer: {0}")]
    Locked(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
