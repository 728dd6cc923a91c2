//! Experiment harness around `fedselect-core`: JSON configs, CSV pools,
//! parallel client execution and the files an experiment writes.

pub mod config;
pub mod csv_pool;
pub mod error;
pub mod executor;
pub mod experiment;
pub mod output;

pub use config::{DataSpec, ExperimentConfig, Method, Overrides};
pub use error::{Result, RunError};
pub use executor::ParallelExecutor;
pub use experiment::{inspect_gradltn, run_experiment, run_sweep, write_outputs, ExperimentOutcome};
