use serde::{Deserialize, Serialize};

use super::ProtocolKind;
use crate::ParamVector;

/// One logged slot for one head (or one client under DSGD, or the client
/// mean under local-only training, reported as head 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub t: usize,
    pub head: usize,
    /// `‖θ̃ − θ*‖²` on the pre-consensus estimate.
    pub delta: Option<f64>,
    /// Global training objective at the broadcast model.
    pub loss: Option<f64>,
    /// Held-out accuracy at the broadcast model.
    pub accuracy: Option<f64>,
    /// Cumulative channel uses up to and including this slot.
    pub channel_uses: u64,
    pub p_t: Option<f64>,
    pub q_t: Option<f64>,
    pub max_uplink_energy: Option<f64>,
    pub max_consensus_energy: Option<f64>,
}

/// Full parameter state around one aggregation slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: usize,
    pub clients_before: Vec<ParamVector>,
    pub tilde: Vec<ParamVector>,
    pub bar: Vec<ParamVector>,
    pub clients_after: Vec<ParamVector>,
}

#[derive(Debug, Clone)]
pub struct RunTrace {
    pub protocol: ProtocolKind,
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    pub initial: ParamVector,
    /// Post-consensus model per head (per client under DSGD and local-only).
    pub final_heads: Vec<ParamVector>,
    pub final_clients: Vec<ParamVector>,
    pub aggregation_slots: usize,
    pub total_channel_uses: u64,
    /// Slots where every transmitted vector was zero and the precoder fell
    /// back to its cap.
    pub saturated_slots: usize,
    /// Bound-mode slots where `p^t > q^{t−E}`.
    pub precode_order_violations: usize,
    pub snapshots: Vec<Snapshot>,
}

impl RunTrace {
    pub fn heads(&self) -> usize {
        self.rows.iter().map(|r| r.head + 1).max().unwrap_or(0)
    }

    pub fn rows_at(&self, t: usize) -> impl Iterator<Item = &MetricsRow> {
        self.rows.iter().filter(move |r| r.t == t)
    }

    /// Distinct logged slots in ascending order.
    pub fn logged_slots(&self) -> Vec<usize> {
        let mut ts: Vec<usize> = self.rows.iter().map(|r| r.t).collect();
        ts.dedup();
        ts
    }

    /// Mean over heads of a metric at slot `t`, if every head has it.
    pub fn mean_at(&self, t: usize, pick: impl Fn(&MetricsRow) -> Option<f64>) -> Option<f64> {
        let vals: Option<Vec<f64>> = self.rows_at(t).map(pick).collect();
        let vals = vals?;
        if vals.is_empty() {
            return None;
        }
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn final_slot(&self) -> usize {
        self.rows.last().map_or(0, |r| r.t)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.mean_at(self.final_slot(), |r| r.accuracy)
    }
}
