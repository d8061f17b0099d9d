//! Data handling, experiment orchestration and report output.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod report;

pub use config::{desk_solver_config, RunConfig, SyntheticSpec};
pub use dataset::{
    default_truth, load_csv, split_for_training, split_standardize, subsample, synthesize, Dataset,
    LoadReport,
};
pub use experiment::{
    grid_search_sgd_lr, grid_search_sgd_lr_system, run_experiment, tune_sgd_lr, ExperimentConfig,
    ExperimentReport, ExperimentResult, LrSearch, SplitRecord,
};
pub use report::{emit_report, load_json, ReportFormat, Tabular};
