//! Parameter grids over a base experiment.
//!
//! Every cell of the grid is a full experiment written to its own
//! subdirectory. A summary table merges the cells afterwards and a few
//! orderings across the grid are checked.

use std::fmt;
use std::fs::File;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::config::{DataSource, ExperimentConfig};
use super::experiment::{run_experiment, write_outputs, ExperimentResult};
use super::HarnessError;
use crate::protocols::{ProtocolKind, RunTrace};

/// Values to sweep. An empty axis keeps the base configuration's value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepGrid {
    pub clusters: Vec<usize>,
    pub classes_per_client: Vec<usize>,
    pub snr_db: Vec<f64>,
    pub prox_lambda: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepCell {
    pub clusters: usize,
    pub classes_per_client: usize,
    pub snr_db: Option<f64>,
    pub prox_lambda: f64,
}

impl SweepCell {
    fn of(cfg: &ExperimentConfig) -> Self {
        Self {
            clusters: cfg.training.clusters,
            classes_per_client: cfg.data.classes_per_client,
            snr_db: cfg.channel.snr_db,
            prox_lambda: cfg.training.prox_lambda,
        }
    }

    /// Directory name for the cell's outputs.
    pub fn label(&self) -> String {
        let snr = self.snr_db.map_or("inf".to_string(), |s| s.to_string());
        format!(
            "c{}-cpc{}-snr{}-lambda{}",
            self.clusters, self.classes_per_client, snr, self.prox_lambda
        )
    }

    /// The base configuration with this cell's values. A head SNR in the
    /// base keeps its offset from the server SNR.
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.training.clusters = self.clusters;
        cfg.data.classes_per_client = self.classes_per_client;
        cfg.training.prox_lambda = self.prox_lambda;
        if let (Some(old), Some(head), Some(new)) =
            (base.channel.snr_db, base.channel.head_snr_db, self.snr_db)
        {
            cfg.channel.head_snr_db = Some(head - old + new);
        }
        cfg.channel.snr_db = self.snr_db;
        cfg
    }
}

impl fmt::Display for SweepCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Cartesian product of the grid axes, clusters varying slowest.
pub fn expand(base: &ExperimentConfig, grid: &SweepGrid) -> Result<Vec<SweepCell>, HarnessError> {
    let b = SweepCell::of(base);
    let or_base = |v: &[usize], d: usize| if v.is_empty() { vec![d] } else { v.to_vec() };
    let clusters = or_base(&grid.clusters, b.clusters);
    let classes = or_base(&grid.classes_per_client, b.classes_per_client);
    let snrs: Vec<Option<f64>> = if grid.snr_db.is_empty() {
        vec![b.snr_db]
    } else {
        grid.snr_db.iter().copied().map(Some).collect()
    };
    let lambdas = if grid.prox_lambda.is_empty() {
        vec![b.prox_lambda]
    } else {
        grid.prox_lambda.clone()
    };

    if !grid.classes_per_client.is_empty() && base.data.source != DataSource::Mnist {
        return Err(HarnessError::Invalid(
            "classes-per-client only applies to mnist data".into(),
        ));
    }
    if let Some(&c) = clusters
        .iter()
        .find(|&&c| c == 0 || c > base.training.clients)
    {
        return Err(HarnessError::Invalid(format!(
            "cannot form {c} clusters from {} clients",
            base.training.clients
        )));
    }
    if let Some(&l) = lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(HarnessError::Invalid(format!(
            "prox lambda must be finite and nonnegative, got {l}"
        )));
    }
    if let Some(s) = snrs.iter().flatten().find(|s| !s.is_finite()) {
        return Err(HarnessError::Invalid(format!(
            "snr must be finite, got {s}"
        )));
    }

    let mut cells = Vec::new();
    for &c in &clusters {
        for &k in &classes {
            for &s in &snrs {
                for &l in &lambdas {
                    cells.push(SweepCell {
                        clusters: c,
                        classes_per_client: k,
                        snr_db: s,
                        prox_lambda: l,
                    });
                }
            }
        }
    }
    Ok(cells)
}

/// Seed statistics for one protocol in one cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    #[serde(flatten)]
    pub cell: SweepCell,
    pub protocol: ProtocolKind,
    pub seeds: usize,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
    pub mean_final_delta: Option<f64>,
    pub channel_uses: u64,
}

impl SummaryRow {
    /// Higher is better: accuracy when logged, else negative distance.
    fn score(&self) -> Option<f64> {
        self.mean_accuracy.or(self.mean_final_delta.map(|d| -d))
    }
}

fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

fn summarize(
    cell: SweepCell,
    result: &ExperimentResult,
    protocols: &[ProtocolKind],
) -> Vec<SummaryRow> {
    protocols
        .iter()
        .map(|&protocol| {
            let traces = result.traces_of(protocol);
            let accs: Option<Vec<f64>> = traces.iter().map(|t| t.final_accuracy()).collect();
            let acc = accs.as_deref().and_then(mean_std);
            let deltas: Option<Vec<f64>> = traces
                .iter()
                .map(|t| t.mean_at(t.final_slot(), |r| r.delta))
                .collect();
            SummaryRow {
                cell,
                protocol,
                seeds: traces.len(),
                mean_accuracy: acc.map(|a| a.0),
                std_accuracy: acc.map(|a| a.1),
                mean_final_delta: deltas.as_deref().and_then(mean_std).map(|d| d.0),
                channel_uses: traces
                    .first()
                    .map_or(0, |t: &&RunTrace| t.total_channel_uses),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderingCheck {
    pub description: String,
    pub holds: bool,
}

impl fmt::Display for OrderingCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}",
            if self.holds { "ok" } else { "violated" },
            self.description
        )
    }
}

/// Groups rows that differ only in the axis picked by `key`, in grid order.
fn along_axis(
    rows: &[SummaryRow],
    same: impl Fn(&SweepCell, &SweepCell) -> bool,
) -> Vec<Vec<&SummaryRow>> {
    let mut groups: Vec<Vec<&SummaryRow>> = Vec::new();
    for r in rows {
        match groups
            .iter_mut()
            .find(|g| g[0].protocol == r.protocol && same(&g[0].cell, &r.cell))
        {
            Some(g) => g.push(r),
            None => groups.push(vec![r]),
        }
    }
    groups.retain(|g| g.len() > 1);
    groups
}

fn non_decreasing(
    rows: &[SummaryRow],
    axis: &str,
    value: impl Fn(&SweepCell) -> String,
    same: impl Fn(&SweepCell, &SweepCell) -> bool,
    metric: impl Fn(&SummaryRow) -> Option<f64>,
    metric_name: &str,
) -> Vec<OrderingCheck> {
    along_axis(rows, same)
        .into_iter()
        .filter_map(|g| {
            let vals: Option<Vec<f64>> = g.iter().map(|r| metric(r)).collect();
            let vals = vals?;
            let holds = vals.windows(2).all(|w| w[1] >= w[0]);
            let path: Vec<String> = g
                .iter()
                .zip(&vals)
                .map(|(r, v)| format!("{}={}: {v:.4}", axis, value(&r.cell)))
                .collect();
            Some(OrderingCheck {
                description: format!(
                    "{} {metric_name} non-decreasing in {axis} ({})",
                    g[0].protocol,
                    path.join(", ")
                ),
                holds,
            })
        })
        .collect()
}

/// Orderings expected across the grid: accuracy grows with the number of
/// classes per client and with SNR, and clustered channel uses grow with
/// the number of clusters. Axes are assumed listed in increasing order.
pub fn ordering_checks(rows: &[SummaryRow]) -> Vec<OrderingCheck> {
    let mut checks = non_decreasing(
        rows,
        "classes_per_client",
        |c| c.classes_per_client.to_string(),
        |a, b| a.clusters == b.clusters && a.snr_db == b.snr_db && a.prox_lambda == b.prox_lambda,
        SummaryRow::score,
        "score",
    );
    checks.extend(non_decreasing(
        rows,
        "snr_db",
        |c| c.snr_db.map_or("inf".into(), |s| s.to_string()),
        |a, b| {
            a.clusters == b.clusters
                && a.classes_per_client == b.classes_per_client
                && a.prox_lambda == b.prox_lambda
        },
        SummaryRow::score,
        "score",
    ));
    let clustered: Vec<SummaryRow> = rows
        .iter()
        .filter(|r| r.protocol.is_clustered())
        .cloned()
        .collect();
    checks.extend(non_decreasing(
        &clustered,
        "clusters",
        |c| c.clusters.to_string(),
        |a, b| {
            a.classes_per_client == b.classes_per_client
                && a.snr_db == b.snr_db
                && a.prox_lambda == b.prox_lambda
        },
        |r| Some(r.channel_uses as f64),
        "channel uses",
    ));
    checks
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SummaryRow>,
    pub checks: Vec<OrderingCheck>,
}

impl SweepOutcome {
    pub fn orderings_hold(&self) -> bool {
        self.checks.iter().all(|c| c.holds)
    }
}

const SUMMARY_COLUMNS: [&str; 10] = [
    "clusters",
    "classes_per_client",
    "snr_db",
    "prox_lambda",
    "protocol",
    "seeds",
    "mean_accuracy",
    "std_accuracy",
    "mean_final_delta",
    "channel_uses",
];

fn write_summary(rows: &[SummaryRow], path: &Path) -> Result<(), HarnessError> {
    let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(SUMMARY_COLUMNS)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.cell.clusters.to_string(),
            r.cell.classes_per_client.to_string(),
            opt(r.cell.snr_db),
            r.cell.prox_lambda.to_string(),
            r.protocol.name().to_string(),
            r.seeds.to_string(),
            opt(r.mean_accuracy),
            opt(r.std_accuracy),
            opt(r.mean_final_delta),
            r.channel_uses.to_string(),
        ])?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))?;
    Ok(())
}

/// Runs every cell in parallel, writing `<out>/<cell label>/` for each, then
/// `<out>/summary.csv` in grid order.
pub fn run_sweep(
    base: &ExperimentConfig,
    config_source: &[u8],
    grid: &SweepGrid,
    out: &Path,
) -> Result<SweepOutcome, HarnessError> {
    let cells = expand(base, grid)?;
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let per_cell = cells
        .par_iter()
        .map(|cell| {
            let cfg = cell.apply(base);
            let result = run_experiment(&cfg)?;
            write_outputs(&cfg, config_source, &result, &out.join(cell.label()))?;
            Ok(summarize(*cell, &result, &cfg.experiment.protocols))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let rows: Vec<SummaryRow> = per_cell.into_iter().flatten().collect();
    write_summary(&rows, &out.join("summary.csv"))?;
    let checks = ordering_checks(&rows);
    Ok(SweepOutcome { rows, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ExperimentConfig {
        ExperimentConfig::from_toml(
            r#"
[experiment]
protocols = ["cwfl", "cotaf"]
seeds = [1, 2]
[data]
source = "quadratic"
per_client = 20
features = 3
[model]
kind = "ridge"
[training]
clients = 6
clusters = 2
epochs = 2
steps = 20
learning_rate = 0.05
[channel]
snr_db = 10.0
head_snr_db = 11.0
"#,
            "test",
        )
        .unwrap()
    }

    #[test]
    fn expansion_is_a_cartesian_product() {
        let grid = SweepGrid {
            clusters: vec![1, 2, 3],
            snr_db: vec![0.0, 20.0],
            ..Default::default()
        };
        let cells = expand(&base(), &grid).unwrap();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[0].clusters, 1);
        assert_eq!(cells[1].snr_db, Some(20.0));
        let labels: std::collections::HashSet<String> =
            cells.iter().map(SweepCell::label).collect();
        assert_eq!(labels.len(), 6);
    }

    #[test]
    fn empty_grid_is_the_base() {
        let cells = expand(&base(), &SweepGrid::default()).unwrap();
        assert_eq!(cells, vec![SweepCell::of(&base())]);
        assert_eq!(cells[0].apply(&base()), base());
    }

    #[test]
    fn head_snr_keeps_its_offset() {
        let cell = SweepCell {
            snr_db: Some(3.0),
            ..SweepCell::of(&base())
        };
        let cfg = cell.apply(&base());
        assert_eq!(cfg.channel.snr_db, Some(3.0));
        assert_eq!(cfg.channel.head_snr_db, Some(4.0));
    }

    #[test]
    fn invalid_axes_are_rejected() {
        let b = base();
        assert!(expand(
            &b,
            &SweepGrid {
                clusters: vec![7],
                ..Default::default()
            }
        )
        .is_err());
        assert!(expand(
            &b,
            &SweepGrid {
                classes_per_client: vec![2],
                ..Default::default()
            }
        )
        .is_err());
        assert!(expand(
            &b,
            &SweepGrid {
                prox_lambda: vec![-1.0],
                ..Default::default()
            }
        )
        .is_err());
    }

    fn row(clusters: usize, snr: f64, acc: f64, uses: u64) -> SummaryRow {
        SummaryRow {
            cell: SweepCell {
                clusters,
                classes_per_client: 4,
                snr_db: Some(snr),
                prox_lambda: 0.1,
            },
            protocol: ProtocolKind::Cwfl,
            seeds: 2,
            mean_accuracy: Some(acc),
            std_accuracy: Some(0.0),
            mean_final_delta: None,
            channel_uses: uses,
        }
    }

    #[test]
    fn orderings_are_checked_per_axis() {
        let rows = vec![
            row(2, 0.0, 0.5, 4),
            row(2, 10.0, 0.7, 4),
            row(3, 0.0, 0.6, 9),
            row(3, 10.0, 0.55, 9),
        ];
        let checks = ordering_checks(&rows);
        let snr: Vec<&OrderingCheck> = checks
            .iter()
            .filter(|c| c.description.contains("snr_db"))
            .collect();
        assert_eq!(snr.len(), 2);
        assert!(snr[0].holds);
        assert!(!snr[1].holds);
        assert!(checks
            .iter()
            .filter(|c| c.description.contains("clusters"))
            .all(|c| c.holds));
    }

    #[test]
    fn sweep_writes_each_cell_and_a_summary() {
        let dir = tempfile::tempdir().unwrap();
        let grid = SweepGrid {
            clusters: vec![1, 2],
            ..Default::default()
        };
        let out = run_sweep(&base(), b"src", &grid, dir.path()).unwrap();
        assert_eq!(out.rows.len(), 4);
        for cell in expand(&base(), &grid).unwrap() {
            assert!(dir.path().join(cell.label()).join("metrics.csv").exists());
            assert!(dir.path().join(cell.label()).join("manifest.toml").exists());
        }
        let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 5);
        let uses: Vec<u64> = out
            .rows
            .iter()
            .filter(|r| r.protocol == ProtocolKind::Cwfl)
            .map(|r| r.channel_uses)
            .collect();
        assert_eq!(uses, vec![10, 40]);
        assert!(out
            .checks
            .iter()
            .any(|c| c.description.contains("clusters") && c.holds));
    }
}
