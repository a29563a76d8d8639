//! Experiment orchestration: configuration, run directories, the five
//! commands and result tables.

mod config;
mod report;
mod run;

pub use config::{
    parse_override, DataConfig, DataSource, EnvironmentFilter, EvaluationConfig, ExperimentConfig, ModelConfig,
    Precision, ProtocolConfig, DATASET_ROOT_ENV,
};
pub use report::{build_report, cmd_report, load_run, load_runs, ActivityPoint, LoadedRun, Report, Table, UserCountPoint};
pub use run::{
    aggregate, cmd_analyze, cmd_evaluate, cmd_prepare, cmd_train, list_runs, load_dataset, make_splits, Dataset,
    DatasetSummary, InvarianceRecord, MeanSd, RunRecord, SplitRecord, SplitSummary, CONFIG_FINGERPRINT_KEY,
};
