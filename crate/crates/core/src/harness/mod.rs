//! Experiment runner: configuration, training loop, repetitions over seeds
//! and variants, persistence and reports.

mod commands;
mod config;
mod gradcheck;
mod train;

pub use commands::*;
pub use config::{ExperimentConfig, Profile, TaskKind, CONFIG_KEYS};
pub use gradcheck::{gradcheck_model, run_gradcheck};
pub use train::{evaluate, initial_params, prepare_data, resolve_model, train_run, GateDump, GateRecord, PreparedData, TrainedRun};
