//! Slot-by-slot execution shared by every protocol.

use rand_distr::{Distribution, Normal};

use super::config::{ConsensusNoise, PrecodeMode, ProtocolConfig};
use super::trace::{MetricsRow, RunTrace, Snapshot};
use super::{ProtocolError, ProtocolKind};
use crate::channel::{
    consensus_precode_factor, decode_cluster, decode_consensus, effective_noise_variance,
    encode_client, encode_head, exchange_receive, mac_superpose, per_link_noise, sample_noise,
    uplink_precode_factor, PrecodeFactor, DEFAULT_HEADROOM_CAP,
};
use crate::objectives::{
    accuracy, global_objective, local_gradient, sgd_step, BatchSampler, Instance, ProxConfig,
};
use crate::rng::{stream, StreamKind};
use crate::topology::{mixing_uniform_complete, ClusterLayout, MixingMatrix};
use crate::ParamVector;

/// Distance to the optimum, training loss and test accuracy.
type Evaluation = (Option<f64>, Option<f64>, Option<f64>);

/// Parameters held by every node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    /// `θ_k^t`
    pub clients: Vec<ParamVector>,
    /// Per group, the broadcast model from the previous aggregation slot,
    /// which is the uplink anchor and the proximal anchor.
    pub anchors: Vec<ParamVector>,
    /// `θ̃_c^t` from the latest slot.
    pub tilde: Vec<ParamVector>,
    /// `θ̄_c^t` from the latest slot.
    pub bar: Vec<ParamVector>,
}

enum Topology {
    /// Uplink per cluster, then optionally the inter-head exchange.
    Clustered {
        layout: ClusterLayout,
        consensus: bool,
    },
    /// Client-to-client mixing.
    Gossip {
        mixing: MixingMatrix,
    },
    Isolated,
}

/// Stepwise driver. [`Simulation::run`] executes all `T` steps.
pub struct Simulation<'a> {
    cfg: &'a ProtocolConfig,
    topology: Topology,
    state: NodeState,
    samplers: Vec<BatchSampler>,
    prox: Option<Vec<ProxConfig>>,
    t: usize,
    channel_uses: u64,
    last_q: Option<f64>,
    trace: RunTrace,
}

fn nonfinite(t: usize, node: usize, stage: &'static str) -> ProtocolError {
    ProtocolError::NonFinite { t, node, stage }
}

/// Rejects vectors that are non-finite or whose squared norm overflows, since
/// either would poison the precoding factor.
fn check_all(vs: &[ParamVector], t: usize, stage: &'static str) -> Result<(), ProtocolError> {
    match vs.iter().position(|v| !v.norm_sq().is_finite()) {
        Some(node) => Err(nonfinite(t, node, stage)),
        None => Ok(()),
    }
}

/// The shared starting point `θ⁰ ~ N(0, init_std²·I)` for `cfg.seed`.
pub fn initial_model(cfg: &ProtocolConfig) -> Result<ParamVector, ProtocolError> {
    let d = cfg.model.dim();
    if cfg.init_std == 0.0 {
        return Ok(ParamVector::zeros(d));
    }
    let normal =
        Normal::new(0.0, cfg.init_std).map_err(|e| ProtocolError::Config(e.to_string()))?;
    let mut rng = stream(cfg.seed, StreamKind::Init, &[]);
    Ok(ParamVector::new(
        (0..d).map(|_| normal.sample(&mut rng)).collect(),
    ))
}

impl<'a> Simulation<'a> {
    pub fn new(cfg: &'a ProtocolConfig) -> Result<Self, ProtocolError> {
        cfg.validate()?;
        let k = cfg.num_clients();
        let topology = match cfg.kind {
            ProtocolKind::Cwfl | ProtocolKind::CwflProx => Topology::Clustered {
                layout: cfg.layout.clone(),
                consensus: true,
            },
            ProtocolKind::Cotaf | ProtocolKind::CotafProx => Topology::Clustered {
                layout: ClusterLayout::single(k)?,
                consensus: false,
            },
            ProtocolKind::Dsgd => Topology::Gossip {
                mixing: cfg
                    .client_mixing
                    .clone()
                    .unwrap_or_else(|| mixing_uniform_complete(k)),
            },
            ProtocolKind::LocalOnly => Topology::Isolated,
        };
        let groups = match &topology {
            Topology::Clustered { layout, .. } => layout.num_clusters(),
            Topology::Gossip { .. } | Topology::Isolated => k,
        };

        let theta0 = initial_model(cfg)?;
        let samplers = cfg
            .shards
            .iter()
            .enumerate()
            .map(|(i, s)| {
                BatchSampler::new(
                    s.size(),
                    cfg.batch_size,
                    stream(cfg.seed, StreamKind::Batch, &[i as u64]),
                )
            })
            .collect();
        let state = NodeState {
            clients: vec![theta0.clone(); k],
            anchors: vec![theta0.clone(); groups],
            tilde: vec![theta0.clone(); groups],
            bar: vec![theta0.clone(); groups],
        };
        let trace = RunTrace {
            protocol: cfg.kind,
            seed: cfg.seed,
            rows: Vec::new(),
            initial: theta0,
            final_heads: Vec::new(),
            final_clients: Vec::new(),
            aggregation_slots: 0,
            total_channel_uses: 0,
            saturated_slots: 0,
            precode_order_violations: 0,
            snapshots: Vec::new(),
        };
        let mut sim = Self {
            cfg,
            topology,
            state,
            samplers,
            prox: None,
            t: 0,
            channel_uses: 0,
            last_q: None,
            trace,
        };
        sim.refresh_prox()?;
        sim.log_slot(None)?;
        Ok(sim)
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn state(&self) -> &NodeState {
        &self.state
    }

    pub fn client(&self, k: usize) -> &ParamVector {
        &self.state.clients[k]
    }

    pub fn channel_uses(&self) -> u64 {
        self.channel_uses
    }

    fn group_of(&self, client: usize) -> usize {
        match &self.topology {
            Topology::Clustered { layout, .. } => layout.cluster_of(client),
            _ => client,
        }
    }

    fn refresh_prox(&mut self) -> Result<(), ProtocolError> {
        if self.cfg.kind.is_prox() {
            let prox = self
                .state
                .anchors
                .iter()
                .map(|a| ProxConfig::new(self.cfg.prox_lambda, a.clone()))
                .collect::<Result<Vec<_>, _>>()?;
            self.prox = Some(prox);
        }
        Ok(())
    }

    /// Advances one local step and aggregates if the new slot is in `H`.
    /// Returns `false` once the budget is exhausted.
    pub fn step(&mut self) -> Result<bool, ProtocolError> {
        let cfg = self.cfg;
        if self.t >= cfg.schedule.steps {
            return Ok(false);
        }
        let eta = cfg.learning_rate.eta(self.t);
        for k in 0..self.state.clients.len() {
            let shard = &cfg.shards[k];
            let batch: Vec<&Instance> = self.samplers[k]
                .next_batch()
                .iter()
                .map(|&i| &shard.instances[i])
                .collect();
            let prox = self.prox.as_ref().map(|p| &p[self.group_of(k)]);
            let grad = local_gradient(&cfg.model, &self.state.clients[k], &batch, prox)?;
            self.state.clients[k] = sgd_step(&self.state.clients[k], &grad, eta)?;
        }
        self.t += 1;
        let t = self.t;
        check_all(&self.state.clients, t, "local update")?;

        if cfg.schedule.contains(t) {
            let before = cfg.record_snapshots.then(|| self.state.clients.clone());
            let info = match self.topology {
                Topology::Clustered { .. } => self.aggregate_clustered(t)?,
                Topology::Gossip { .. } => self.aggregate_gossip(t)?,
                Topology::Isolated => SlotInfo::default(),
            };
            self.trace.aggregation_slots += 1;
            if let Some(clients_before) = before {
                self.trace.snapshots.push(Snapshot {
                    t,
                    clients_before,
                    tilde: self.state.tilde.clone(),
                    bar: self.state.bar.clone(),
                    clients_after: self.state.clients.clone(),
                });
            }
            self.log_slot(Some(info))?;
        } else if t == cfg.schedule.steps {
            // Final slot outside H: report the virtual per-group average.
            if let Topology::Clustered { layout, .. } = &self.topology {
                for c in 0..layout.num_clusters() {
                    let avg = ParamVector::mean(
                        layout.members(c).iter().map(|&k| &self.state.clients[k]),
                    )
                    .expect("clusters are nonempty");
                    self.state.tilde[c] = avg.clone();
                    self.state.bar[c] = avg;
                }
            } else {
                self.state.tilde = self.state.clients.clone();
                self.state.bar = self.state.clients.clone();
            }
            self.log_slot(None)?;
        }
        Ok(true)
    }

    fn uplink_factor(
        &self,
        deltas: &[ParamVector],
        eta: f64,
    ) -> Result<PrecodeFactor, ProtocolError> {
        let cfg = self.cfg;
        Ok(match cfg.precoding {
            PrecodeMode::Genie => {
                uplink_precode_factor(deltas, cfg.channel.p1, DEFAULT_HEADROOM_CAP)?
            }
            PrecodeMode::Bound { grad_bound, .. } => {
                let e = cfg.schedule.epochs as f64;
                PrecodeFactor::finite(
                    cfg.channel.p1 / (4.0 * e * e * eta * eta * grad_bound * grad_bound),
                )?
            }
        })
    }

    fn aggregate_clustered(&mut self, t: usize) -> Result<SlotInfo, ProtocolError> {
        let cfg = self.cfg;
        let Topology::Clustered { layout, consensus } = &self.topology else {
            unreachable!()
        };
        let (layout, consensus) = (layout.clone(), *consensus);
        let eta = cfg.learning_rate.eta(t);
        let d = cfg.model.dim();
        let c_count = layout.num_clusters();
        let mut info = SlotInfo::default();

        // Phase 1: OTA uplink inside each cluster.
        let deltas: Vec<ParamVector> = (0..self.state.clients.len())
            .map(|k| self.state.clients[k].sub(&self.state.anchors[layout.cluster_of(k)]))
            .collect();
        check_all(&deltas, t, "uplink precoding")?;
        let p = self.uplink_factor(&deltas, eta)?;
        info.saturated |= p.saturated;
        let mut max_up = 0.0f64;
        for c in 0..c_count {
            let anchor = &self.state.anchors[c];
            let signals = layout
                .members(c)
                .iter()
                .map(|&k| encode_client(&self.state.clients[k], anchor, p.value))
                .collect::<Result<Vec<_>, _>>()?;
            for x in &signals {
                max_up = max_up.max(x.norm_sq());
            }
            let mut rng = cfg.channel.stream(StreamKind::UplinkNoise, t, c);
            let noise = sample_noise(d, cfg.channel.variance(c), &mut rng)?;
            let y = mac_superpose(&signals, &noise)?;
            self.state.tilde[c] = decode_cluster(&y, layout.members(c).len(), p.value, anchor)?;
        }
        check_all(&self.state.tilde, t, "cluster decode")?;
        info.p = Some(p.value);
        info.uplink_energy = Some(max_up);
        let mut uses = c_count as u64;

        // Phase 2: noisy exchange among heads.
        if consensus {
            let q = match cfg.precoding {
                PrecodeMode::Genie => consensus_precode_factor(
                    &self.state.tilde,
                    cfg.channel.p2,
                    DEFAULT_HEADROOM_CAP,
                )?,
                PrecodeMode::Bound { consensus_a, .. } => {
                    PrecodeFactor::finite(1.0 / (eta * eta * consensus_a))?
                }
            };
            info.saturated |= q.saturated;
            if matches!(cfg.precoding, PrecodeMode::Bound { .. }) {
                if let Some(prev) = self.last_q {
                    if p.value > prev {
                        self.trace.precode_order_violations += 1;
                    }
                }
            }
            self.last_q = Some(q.value);
            let signals = self
                .state
                .tilde
                .iter()
                .map(|v| encode_head(v, q.value))
                .collect::<Result<Vec<_>, _>>()?;
            let max_cons = signals
                .iter()
                .map(ParamVector::norm_sq)
                .fold(0.0f64, f64::max);
            let sigma2: Vec<f64> = (0..c_count).map(|j| cfg.channel.variance(j)).collect();
            for c in 0..c_count {
                let row = cfg.mixing.row(c);
                let mut rng = cfg.channel.stream(StreamKind::ConsensusNoise, t, c);
                let noise = match cfg.consensus_noise {
                    ConsensusNoise::Direct => {
                        sample_noise(d, effective_noise_variance(row, &sigma2)?, &mut rng)?
                    }
                    ConsensusNoise::PerLink => per_link_noise(d, row, &sigma2, &mut rng)?,
                };
                let r = exchange_receive(&signals, row, c, &noise)?;
                self.state.bar[c] =
                    decode_consensus(&self.state.tilde[c], &r, q.value, row, cfg.decode)?;
                uses += cfg.mixing.degree(c) as u64;
            }
            check_all(&self.state.bar, t, "consensus decode")?;
            info.q = Some(q.value);
            info.consensus_energy = Some(max_cons);
        } else {
            self.state.bar = self.state.tilde.clone();
        }

        // Phase 3: broadcast.
        for k in 0..self.state.clients.len() {
            self.state.clients[k] = self.state.bar[layout.cluster_of(k)].clone();
        }
        self.state.anchors = self.state.bar.clone();
        self.refresh_prox()?;
        self.channel_uses += uses;
        if info.saturated {
            self.trace.saturated_slots += 1;
        }
        Ok(info)
    }

    fn aggregate_gossip(&mut self, t: usize) -> Result<SlotInfo, ProtocolError> {
        let cfg = self.cfg;
        let Topology::Gossip { mixing } = &self.topology else {
            unreachable!()
        };
        let d = cfg.model.dim();
        let k_count = self.state.clients.len();
        let p =
            consensus_precode_factor(&self.state.clients, cfg.channel.p1, DEFAULT_HEADROOM_CAP)?;
        let signals = self
            .state
            .clients
            .iter()
            .map(|v| encode_head(v, p.value))
            .collect::<Result<Vec<_>, _>>()?;
        let max_up = signals
            .iter()
            .map(ParamVector::norm_sq)
            .fold(0.0f64, f64::max);
        let inv_sqrt_p = 1.0 / p.value.sqrt();
        let mut next = Vec::with_capacity(k_count);
        let mut uses = 0u64;
        for l in 0..k_count {
            let degree = mixing.degree(l);
            let self_weight = 1.0 / (1.0 + degree as f64);
            let mut acc = self.state.clients[l].scaled(self_weight);
            let mut rng = cfg.channel.stream(StreamKind::LinkNoise, t, l);
            for (k, &w) in mixing.row(l).iter().enumerate() {
                if k == l || w == 0.0 {
                    continue;
                }
                let noise = sample_noise(d, cfg.channel.variance(l), &mut rng)?;
                let mut received = signals[k].add(&noise);
                received.scale(inv_sqrt_p);
                acc.axpy((1.0 - self_weight) * w, &received);
            }
            uses += degree as u64;
            next.push(acc);
        }
        check_all(&next, t, "gossip mixing")?;
        self.state.clients = next.clone();
        self.state.tilde = next.clone();
        self.state.bar = next.clone();
        self.state.anchors = next;
        self.channel_uses += uses;
        if p.saturated {
            self.trace.saturated_slots += 1;
        }
        Ok(SlotInfo {
            p: Some(p.value),
            uplink_energy: Some(max_up),
            saturated: p.saturated,
            ..Default::default()
        })
    }

    fn evaluate(
        &self,
        tilde: &ParamVector,
        bar: &ParamVector,
    ) -> Result<Evaluation, ProtocolError> {
        let cfg = self.cfg;
        let delta = cfg.eval.theta_star.as_ref().map(|s| tilde.dist_sq(s));
        let loss = if cfg.eval.log_loss {
            Some(global_objective(&cfg.model, bar, &cfg.shards)?)
        } else {
            None
        };
        let acc = match &cfg.eval.test_set {
            Some(test) if cfg.model.is_classifier() => Some(accuracy(&cfg.model, bar, test)?),
            _ => None,
        };
        Ok((delta, loss, acc))
    }

    fn log_slot(&mut self, info: Option<SlotInfo>) -> Result<(), ProtocolError> {
        let info = info.unwrap_or_default();
        let t = self.t;
        let base = MetricsRow {
            t,
            head: 0,
            delta: None,
            loss: None,
            accuracy: None,
            channel_uses: self.channel_uses,
            p_t: info.p,
            q_t: info.q,
            max_uplink_energy: info.uplink_energy,
            max_consensus_energy: info.consensus_energy,
        };
        if let Topology::Isolated = self.topology {
            let n = self.state.clients.len() as f64;
            let (mut sd, mut sl, mut sa) = (Some(0.0), Some(0.0), Some(0.0));
            for theta in &self.state.clients {
                let (d, l, a) = self.evaluate(theta, theta)?;
                sd = sd.zip(d).map(|(x, y)| x + y);
                sl = sl.zip(l).map(|(x, y)| x + y);
                sa = sa.zip(a).map(|(x, y)| x + y);
            }
            self.trace.rows.push(MetricsRow {
                delta: sd.map(|x| x / n),
                loss: sl.map(|x| x / n),
                accuracy: sa.map(|x| x / n),
                ..base
            });
            return Ok(());
        }
        for head in 0..self.state.tilde.len() {
            let (delta, loss, accuracy) =
                self.evaluate(&self.state.tilde[head], &self.state.bar[head])?;
            self.trace.rows.push(MetricsRow {
                head,
                delta,
                loss,
                accuracy,
                ..base.clone()
            });
        }
        Ok(())
    }

    pub fn finish(mut self) -> RunTrace {
        self.trace.final_heads = self.state.bar;
        self.trace.final_clients = self.state.clients;
        self.trace.total_channel_uses = self.channel_uses;
        self.trace
    }

    pub fn run(mut self) -> Result<RunTrace, ProtocolError> {
        while self.step()? {}
        Ok(self.finish())
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct SlotInfo {
    p: Option<f64>,
    q: Option<f64>,
    uplink_energy: Option<f64>,
    consensus_energy: Option<f64>,
    saturated: bool,
}
