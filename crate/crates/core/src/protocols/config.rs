use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ProtocolError, ProtocolKind, RoundSchedule};
use crate::channel::{ChannelEnv, DecodeMode};
use crate::objectives::{ClientShard, Instance, ModelSpec};
use crate::topology::{mixing_uniform_complete, validate_mixing, ClusterLayout, MixingMatrix};
use crate::ParamVector;

/// Step-size schedule indexed by the local step counter `t = 0, 1, ...`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LearningRate {
    Constant(f64),
    /// `η^t = 2 / (μ(γ + t))`
    Theorem {
        mu: f64,
        gamma: f64,
    },
}

impl LearningRate {
    pub fn eta(&self, t: usize) -> f64 {
        match *self {
            Self::Constant(eta) => eta,
            Self::Theorem { mu, gamma } => 2.0 / (mu * (gamma + t as f64)),
        }
    }

    fn validate(&self) -> Result<(), ProtocolError> {
        let ok = match *self {
            Self::Constant(eta) => eta > 0.0 && eta.is_finite(),
            Self::Theorem { mu, gamma } => {
                mu > 0.0 && gamma > 0.0 && mu.is_finite() && gamma.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(ProtocolError::Config(format!(
                "invalid learning rate {self:?}"
            )))
        }
    }
}

/// How the transmit scalings `p^t` and `q^t` are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PrecodeMode {
    /// Normalize by the realized maximum norm so the budget is met with
    /// equality by the strongest transmitter.
    Genie,
    /// Deterministic scalings from the gradient bound `G` and the per-head
    /// constant `A` (worst head): `p^t = P1 / (4E²(η^t)²G²)` and
    /// `q^t = 1 / ((η^t)²·A)`.
    Bound { grad_bound: f64, consensus_a: f64 },
}

/// How the inter-head receiver noise is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ConsensusNoise {
    /// A single draw with the aggregate variance `Σ_j W(c,j)σ_j²`.
    Direct,
    /// One draw per incoming link, scaled by `√W(c,j)`.
    #[default]
    PerLink,
}

/// What to measure at each logged slot.
#[derive(Debug, Clone, Default)]
pub struct EvalContext {
    /// Enables the distance-to-optimum column.
    pub theta_star: Option<ParamVector>,
    /// Enables the accuracy column for classifiers.
    pub test_set: Option<Arc<Vec<Instance>>>,
    /// Enables the global training-loss column.
    pub log_loss: bool,
}

#[derive(Debug, Clone)]
pub struct ProtocolConfig {
    pub kind: ProtocolKind,
    pub model: ModelSpec,
    pub shards: Arc<Vec<ClientShard>>,
    /// Receiver noise: indexed by head for clustered kinds, a single entry for
    /// the server under COTAF, and indexed by client under DSGD.
    pub channel: ChannelEnv,
    pub layout: ClusterLayout,
    /// Head-level `W`.
    pub mixing: MixingMatrix,
    /// Client-level mixing for DSGD; uniform complete when absent.
    pub client_mixing: Option<MixingMatrix>,
    pub prox_lambda: f64,
    pub learning_rate: LearningRate,
    pub precoding: PrecodeMode,
    pub decode: DecodeMode,
    pub consensus_noise: ConsensusNoise,
    pub schedule: RoundSchedule,
    /// Zero means full batch.
    pub batch_size: usize,
    /// Drives initialization and mini-batch order. Channel noise is keyed by
    /// `channel.noise_seed`.
    pub seed: u64,
    /// Standard deviation of each coordinate of the shared initial model.
    pub init_std: f64,
    pub eval: EvalContext,
    /// Keep full parameter snapshots at every aggregation slot.
    pub record_snapshots: bool,
}

impl ProtocolConfig {
    /// Single cluster, noiseless unit-power channel, no evaluation.
    pub fn new(
        kind: ProtocolKind,
        model: ModelSpec,
        shards: Arc<Vec<ClientShard>>,
        schedule: RoundSchedule,
        learning_rate: LearningRate,
        seed: u64,
    ) -> Result<Self, ProtocolError> {
        let k = shards.len();
        Ok(Self {
            kind,
            model,
            shards,
            channel: ChannelEnv::new(1.0, 1.0, vec![0.0], seed)?,
            layout: ClusterLayout::single(k)?,
            mixing: mixing_uniform_complete(1),
            client_mixing: None,
            prox_lambda: 0.0,
            learning_rate,
            precoding: PrecodeMode::Genie,
            decode: DecodeMode::Normalized,
            consensus_noise: ConsensusNoise::PerLink,
            schedule,
            batch_size: 0,
            seed,
            init_std: 0.1,
            eval: EvalContext::default(),
            record_snapshots: false,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let k = self.num_clients();
        if k == 0 {
            return Err(ProtocolError::Config("no client shards".into()));
        }
        self.learning_rate.validate()?;
        if !(self.init_std >= 0.0) || !self.init_std.is_finite() {
            return Err(ProtocolError::Config(format!(
                "invalid init_std {}",
                self.init_std
            )));
        }
        if self.kind.is_prox() {
            if !(self.prox_lambda > 0.0) || !self.prox_lambda.is_finite() {
                return Err(ProtocolError::Config(format!(
                    "{} requires prox_lambda > 0, got {}",
                    self.kind, self.prox_lambda
                )));
            }
        } else if self.prox_lambda != 0.0 {
            return Err(ProtocolError::Config(format!(
                "{} takes no prox_lambda",
                self.kind
            )));
        }
        if self.kind.is_clustered() {
            if self.layout.num_clients() != k {
                return Err(ProtocolError::Config(format!(
                    "layout covers {} clients but {} shards were given",
                    self.layout.num_clients(),
                    k
                )));
            }
            if self.mixing.size() != self.layout.num_clusters() {
                return Err(ProtocolError::Config(format!(
                    "mixing matrix is {0}x{0} for {1} clusters",
                    self.mixing.size(),
                    self.layout.num_clusters()
                )));
            }
            if !validate_mixing(&self.mixing).all_pass() {
                return Err(ProtocolError::Config(
                    "head mixing matrix fails validation".into(),
                ));
            }
        }
        if let Some(w) = &self.client_mixing {
            if w.size() != k || !validate_mixing(w).all_pass() {
                return Err(ProtocolError::Config(
                    "client mixing matrix is invalid".into(),
                ));
            }
        }
        if let PrecodeMode::Bound {
            grad_bound,
            consensus_a,
        } = self.precoding
        {
            if !(grad_bound > 0.0 && consensus_a > 0.0)
                || !grad_bound.is_finite()
                || !consensus_a.is_finite()
            {
                return Err(ProtocolError::Config(
                    "bound precoding needs finite G > 0 and A > 0".into(),
                ));
            }
        }
        let receivers = match self.kind {
            ProtocolKind::Cotaf | ProtocolKind::CotafProx => 1,
            ProtocolKind::Dsgd => k,
            ProtocolKind::LocalOnly => 0,
            _ => self.layout.num_clusters(),
        };
        let n = self.channel.sigma2.len();
        if n > 1 && n < receivers {
            return Err(ProtocolError::Config(format!(
                "{n} noise variances for {receivers} receivers"
            )));
        }
        if let Some(star) = &self.eval.theta_star {
            if star.len() != self.model.dim() {
                return Err(ProtocolError::Config(
                    "theta_star has the wrong dimension".into(),
                ));
            }
        }
        Ok(())
    }
}
