//! Library side of the `chronomerge` command: config loading, experiment
//! runs, sweeps and the subcommand bodies.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod sweep;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
pub use sweep::SweepGrid;
