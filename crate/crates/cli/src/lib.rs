//! Experiment runner for the `metamorph` library.
//!
//! A JSON [`config::ExperimentConfig`] names one scenario; [`run::run`]
//! executes it and writes CSV/JSON outputs plus a `manifest.json`.

pub mod config;
pub mod error;
pub mod output;
pub mod run;
pub mod setup;

pub use config::ExperimentConfig;
pub use error::CliError;
pub use run::{run, validate, RunOptions, RunReport};
