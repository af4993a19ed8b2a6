//! CSV emission and parsing of metric rows.
//!
//! Columns, in order: `protocol, seed, head, t, delta, loss, accuracy,
//! channel_uses, p_t, q_t, max_uplink_energy, max_consensus_energy`.
//! Missing metrics are empty fields. Floats use the shortest representation
//! that parses back to the same value.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::HarnessError;
use crate::protocols::{MetricsRow, ProtocolKind, RunTrace};

pub const COLUMNS: [&str; 12] = [
    "protocol",
    "seed",
    "head",
    "t",
    "delta",
    "loss",
    "accuracy",
    "channel_uses",
    "p_t",
    "q_t",
    "max_uplink_energy",
    "max_consensus_energy",
];

#[derive(Debug, Clone, PartialEq)]
pub struct CsvRecord {
    pub protocol: ProtocolKind,
    pub seed: u64,
    pub row: MetricsRow,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes traces sorted by `(protocol, seed)`, rows in logging order.
pub fn write_csv<W: Write>(traces: &[RunTrace], out: W) -> Result<(), HarnessError> {
    if traces.is_empty() {
        return Err(HarnessError::Invalid("no traces to emit".into()));
    }
    let mut order: Vec<&RunTrace> = traces.iter().collect();
    order.sort_by_key(|t| (t.protocol, t.seed));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COLUMNS)?;
    for tr in order {
        for r in &tr.rows {
            w.write_record([
                tr.protocol.name().to_string(),
                tr.seed.to_string(),
                r.head.to_string(),
                r.t.to_string(),
                opt(r.delta),
                opt(r.loss),
                opt(r.accuracy),
                r.channel_uses.to_string(),
                opt(r.p_t),
                opt(r.q_t),
                opt(r.max_uplink_energy),
                opt(r.max_consensus_energy),
            ])?;
        }
    }
    w.flush().map_err(|e| HarnessError::Csv(e.to_string()))?;
    Ok(())
}

pub fn emit_csv(traces: &[RunTrace], path: &Path) -> Result<(), HarnessError> {
    let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    write_csv(traces, file)
}

fn field<T: std::str::FromStr>(
    rec: &csv::StringRecord,
    i: usize,
    line: u64,
) -> Result<T, HarnessError> {
    rec[i].parse().map_err(|_| {
        HarnessError::Csv(format!(
            "line {line}: bad {} value {:?}",
            COLUMNS[i], &rec[i]
        ))
    })
}

fn opt_field(rec: &csv::StringRecord, i: usize, line: u64) -> Result<Option<f64>, HarnessError> {
    if rec[i].is_empty() {
        Ok(None)
    } else {
        field(rec, i, line).map(Some)
    }
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<CsvRecord>, HarnessError> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(COLUMNS.iter().copied()) {
        return Err(HarnessError::Csv(format!(
            "unexpected header {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let protocol = rec[0]
            .parse::<ProtocolKind>()
            .map_err(|e| HarnessError::Csv(format!("line {line}: {e}")))?;
        out.push(CsvRecord {
            protocol,
            seed: field(&rec, 1, line)?,
            row: MetricsRow {
                head: field(&rec, 2, line)?,
                t: field(&rec, 3, line)?,
                delta: opt_field(&rec, 4, line)?,
                loss: opt_field(&rec, 5, line)?,
                accuracy: opt_field(&rec, 6, line)?,
                channel_uses: field(&rec, 7, line)?,
                p_t: opt_field(&rec, 8, line)?,
                q_t: opt_field(&rec, 9, line)?,
                max_uplink_energy: opt_field(&rec, 10, line)?,
                max_consensus_energy: opt_field(&rec, 11, line)?,
            },
        });
    }
    Ok(out)
}

/// Structural checks on parsed rows: channel uses never decrease within a
/// `(protocol, seed, head)` series.
pub fn check_records(records: &[CsvRecord]) -> Result<(), HarnessError> {
    use std::collections::HashMap;
    let mut last: HashMap<(ProtocolKind, u64, usize), (usize, u64)> = HashMap::new();
    for r in records {
        let key = (r.protocol, r.seed, r.row.head);
        if let Some(&(t, uses)) = last.get(&key) {
            if r.row.t < t || r.row.channel_uses < uses {
                return Err(HarnessError::Csv(format!(
                    "{} seed {} head {}: slot {} goes backwards",
                    r.protocol, r.seed, r.row.head, r.row.t
                )));
            }
        }
        last.insert(key, (r.row.t, r.row.channel_uses));
    }
    Ok(())
}
