//! Experiment runner for `dynflow`: training, error analysis, Koopman fits
//! and benchmarks, each writing plot-ready files into one output directory.

pub mod commands;
pub mod config;
pub mod output;

use thiserror::Error;

pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical abort: {0}")]
    Numerical(dynflow::Error),
    #[error("{0}")]
    Core(dynflow::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io { .. } => 1,
        }
    }
}

impl From<dynflow::Error> for CliError {
    fn from(e: dynflow::Error) -> Self {
        use dynflow::Error as E;
        match e {
            E::NonFiniteState { .. } | E::NonFiniteLoss { .. } | E::EstimatorDiverged { .. } | E::Cycle { .. } => {
                CliError::Numerical(e)
            }
            other => CliError::Core(other),
        }
    }
}
