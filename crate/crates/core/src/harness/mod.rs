//! Experiment orchestration: configuration, the training loop, evaluation,
//! logging and plot data.

mod config;
mod run;
mod runlog;

pub use config::{Method, RunConfig, DEFAULT_PRETRAIN_MAX_LOSS, SEED_ENV};
pub use run::{
    evaluate, initial_model, run_training, run_training_from, EvalReport, RunArtifacts, RunSummary,
};
pub use runlog::{
    emit_plot_data, normalized_reward, IterationRecord, RunLog, RUNLOG_SCHEMA_VERSION,
};
