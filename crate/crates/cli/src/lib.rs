//! Command layer for the unified decoder: config files, datasets, checkpoints,
//! latency benchmarking, ablation grids and reports.

pub mod ablate;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod pipeline;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
