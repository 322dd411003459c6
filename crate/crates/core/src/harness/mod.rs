//! Command-line harness: configuration, artifacts, metrics and the benchmark
//! matrix.

pub mod artifacts;
pub mod benchmark;
pub mod cli;
pub mod config;
pub mod metrics;

use thiserror::Error;

use crate::mhe::MheError;
use crate::optim::OptimError;
use crate::plant::PlantError;
use crate::window::WindowError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error {0}")]
    Config(String),
    #[error("missing input file: {0}")]
    MissingInput(String),
    #[error("cannot write {path}: {message}")]
    Output { path: String, message: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl HarnessError {
    /// 1 for anything wrong with the inputs or environment, 2 when the
    /// computation itself failed.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Numerical(_) => 2,
            _ => 1,
        }
    }
}

impl From<MheError> for HarnessError {
    fn from(e: MheError) -> Self {
        match e {
            MheError::InvalidConfig(m) => Self::Config(m),
            MheError::Window(
                w @ (WindowError::NonMonotonicTime { .. }
                | WindowError::InvalidSchedule(_)
                | WindowError::UnstablePole(_)
                | WindowError::ImproperFilter(_)),
            ) => Self::Config(w.to_string()),
            MheError::Optim(o @ OptimError::InvalidOptions(_)) => Self::Config(o.to_string()),
            other => Self::Numerical(other.to_string()),
        }
    }
}

impl From<PlantError> for HarnessError {
    fn from(e: PlantError) -> Self {
        match e {
            PlantError::Ecm(e) => Self::Numerical(e.to_string()),
            other => Self::Config(other.to_string()),
        }
    }
}
