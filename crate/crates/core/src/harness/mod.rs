//! Experiment configuration, theory constants, measurement and reporting.

pub mod acceptance;
pub mod config;
pub mod experiment;
pub mod gradient_bound;
pub mod ledger;
pub mod manifest;
pub mod report;
pub mod slope;
pub mod sweep;
pub mod theorem;

use std::path::Path;

use thiserror::Error;

use crate::channel::ChannelError;
use crate::objectives::{IdxError, ObjectiveError};
use crate::protocols::ProtocolError;
use crate::topology::TopologyError;

pub use config::{ConfigError, ExperimentConfig};
pub use experiment::{build_problem, run_experiment, ExperimentResult};
pub use gradient_bound::{estimate_gradient_bound, GradientBound, WarmupOptions};
pub use ledger::{channel_ledger, LedgerLine};
pub use report::{emit_csv, read_csv};
pub use slope::{average_traces, check_bound_dominance, fit_convergence_slope, DominanceReport};
pub use theorem::{theorem_constants, TheoremConstants, TheoremInputs};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

impl HarnessError {
    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            msg: err.to_string(),
        }
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        Self::Csv(e.to_string())
    }
}

impl std::error::Error for ConfigError {}
