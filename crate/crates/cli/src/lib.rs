//! Command-line driver: experiment configs, CSV ingestion, result documents,
//! evaluation against ground truth and replication presets.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod result;

pub use error::{CliError, CliResult};
