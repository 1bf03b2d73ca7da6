//! Experiment harness for the `chunkkv` laboratory: JSON configs in,
//! deterministic reports, sweep CSVs and similarity heatmaps out.
//!
//! Exit codes: 0 success, 1 internal error, 2 config or usage error.

pub mod commands;
pub mod config;
pub mod error;
pub mod heatmap;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
