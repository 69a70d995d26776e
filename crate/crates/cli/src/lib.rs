//! Experiment plumbing for `damtl`: config files, per-seed pipelines, artifact
//! layout and result tables.

pub mod config;
pub mod error;
pub mod experiment;
pub mod output;
pub mod summary;

pub use config::{ExperimentConfig, Mode};
pub use error::{CliError, Result};
pub use summary::{emit_summary, RunAccuracy, Summary};
