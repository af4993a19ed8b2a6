//! Channel-use comparison across protocols.

use serde::Serialize;

use super::HarnessError;
use crate::protocols::{channel_uses_per_slot, ProtocolKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LedgerLine {
    pub protocol: ProtocolKind,
    pub per_slot: u64,
    pub total: u64,
}

/// Per-slot and total channel uses for CWFL, COTAF, DSGD and local training
/// over `rounds` aggregation slots with all-to-all mixing.
pub fn channel_ledger(
    clients: usize,
    clusters: usize,
    rounds: usize,
) -> Result<Vec<LedgerLine>, HarnessError> {
    [
        ProtocolKind::Cwfl,
        ProtocolKind::Cotaf,
        ProtocolKind::Dsgd,
        ProtocolKind::LocalOnly,
    ]
    .into_iter()
    .map(|protocol| {
        let per_slot = channel_uses_per_slot(protocol, clients, clusters)?;
        Ok(LedgerLine {
            protocol,
            per_slot,
            total: per_slot * rounds as u64,
        })
    })
    .collect()
}

pub fn format_ledger(lines: &[LedgerLine]) -> String {
    let mut out = format!("{:<12}{:>12}{:>14}\n", "protocol", "per slot", "total");
    for l in lines {
        out.push_str(&format!(
            "{:<12}{:>12}{:>14}\n",
            l.protocol.name(),
            l.per_slot,
            l.total
        ));
    }
    out
}
