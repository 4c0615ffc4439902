//! Command-line front end: experiment configs, batch runs and reports.

pub mod commands;
pub mod config;
pub mod error;

pub use config::{ExperimentConfig, RunManifest};
pub use error::CliError;
