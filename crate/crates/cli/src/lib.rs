//! Configuration-driven experiment runner for the nudged Navier-Stokes
//! solver.

pub mod config;
pub mod run;

use thiserror::Error;

pub use config::{load_config, parse_config, ExperimentConfig};
pub use run::{run_experiment, RunSummary};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}
