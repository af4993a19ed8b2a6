//! Round-structured training protocols.

pub mod config;
pub mod engine;
pub mod schedule;
pub mod trace;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::ChannelError;
use crate::objectives::ObjectiveError;
use crate::topology::TopologyError;

pub use config::{ConsensusNoise, EvalContext, LearningRate, PrecodeMode, ProtocolConfig};
pub use engine::{initial_model, NodeState, Simulation};
pub use schedule::{schedule_aggregations, RoundSchedule};
pub use trace::{MetricsRow, RunTrace, Snapshot};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("need T >= E >= 1, got T={steps}, E={epochs}")]
    Schedule { steps: usize, epochs: usize },
    #[error("invalid protocol config: {0}")]
    Config(String),
    #[error("non-finite parameters at node {node} after {stage} in slot {t}")]
    NonFinite {
        t: usize,
        node: usize,
        stage: &'static str,
    },
    #[error("unknown protocol {0:?}")]
    UnknownProtocol(String),
    #[error("{called} called with a {given} config")]
    WrongKind {
        called: ProtocolKind,
        given: ProtocolKind,
    },
    #[error("inconsistent sizes: K={clients}, C={clusters}")]
    Sizes { clients: usize, clusters: usize },
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolKind {
    Cwfl,
    CwflProx,
    Cotaf,
    CotafProx,
    Dsgd,
    LocalOnly,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 6] = [
        Self::Cwfl,
        Self::CwflProx,
        Self::Cotaf,
        Self::CotafProx,
        Self::Dsgd,
        Self::LocalOnly,
    ];

    pub fn is_prox(self) -> bool {
        matches!(self, Self::CwflProx | Self::CotafProx)
    }

    pub fn is_clustered(self) -> bool {
        matches!(self, Self::Cwfl | Self::CwflProx)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Cwfl => "cwfl",
            Self::CwflProx => "cwfl-prox",
            Self::Cotaf => "cotaf",
            Self::CotafProx => "cotaf-prox",
            Self::Dsgd => "dsgd",
            Self::LocalOnly => "local-only",
        }
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProtocolKind {
    type Err = ProtocolError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ProtocolError::UnknownProtocol(s.to_string()))
    }
}

/// Orthogonal transmissions per aggregation slot with all-to-all mixing:
/// `C` uplinks plus `C(C−1)` head links for CWFL, one for COTAF, `K(K−1)`
/// for DSGD and none for local training.
pub fn channel_uses_per_slot(
    protocol: ProtocolKind,
    clients: usize,
    clusters: usize,
) -> Result<u64, ProtocolError> {
    let (k, c) = (clients as u64, clusters as u64);
    if k == 0 || (protocol.is_clustered() && (c == 0 || c > k)) {
        return Err(ProtocolError::Sizes { clients, clusters });
    }
    Ok(match protocol {
        ProtocolKind::Cwfl | ProtocolKind::CwflProx => c * c,
        ProtocolKind::Cotaf | ProtocolKind::CotafProx => 1,
        ProtocolKind::Dsgd => k * (k - 1),
        ProtocolKind::LocalOnly => 0,
    })
}

fn run_checked(cfg: &ProtocolConfig, accepted: &[ProtocolKind]) -> Result<RunTrace, ProtocolError> {
    if !accepted.contains(&cfg.kind) {
        return Err(ProtocolError::WrongKind {
            called: accepted[0],
            given: cfg.kind,
        });
    }
    Simulation::new(cfg)?.run()
}

/// Dispatches on `cfg.kind`.
pub fn run_protocol(cfg: &ProtocolConfig) -> Result<RunTrace, ProtocolError> {
    Simulation::new(cfg)?.run()
}

pub fn run_cwfl(cfg: &ProtocolConfig) -> Result<RunTrace, ProtocolError> {
    run_checked(cfg, &[ProtocolKind::Cwfl])
}

pub fn run_cwfl_prox(cfg: &ProtocolConfig) -> Result<RunTrace, ProtocolError> {
    run_checked(cfg, &[ProtocolKind::CwflProx])
}

pub fn run_cotaf(cfg: &ProtocolConfig) -> Result<RunTrace, ProtocolError> {
    run_checked(cfg, &[ProtocolKind::Cotaf])
}

pub fn run_cotaf_prox(cfg: &ProtocolConfig) -> Result<RunTrace, ProtocolError> {
    run_checked(cfg, &[ProtocolKind::CotafProx])
}

pub fn run_dsgd(cfg: &ProtocolConfig) -> Result<RunTrace, ProtocolError> {
    run_checked(cfg, &[ProtocolKind::Dsgd])
}

pub fn run_local_only(cfg: &ProtocolConfig) -> Result<RunTrace, ProtocolError> {
    run_checked(cfg, &[ProtocolKind::LocalOnly])
}
