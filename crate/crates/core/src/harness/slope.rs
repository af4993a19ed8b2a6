//! Log-log slope fits and comparison against the theoretical bound curve.

use std::collections::BTreeMap;

use serde::Serialize;

use super::theorem::TheoremConstants;
use super::HarnessError;
use crate::protocols::{MetricsRow, RunTrace};

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Result<f64, HarnessError> {
    if points.len() < 2 {
        return Err(HarnessError::Invalid(format!(
            "need at least 2 points for a slope, got {}",
            points.len()
        )));
    }
    let mut pts = Vec::with_capacity(points.len());
    for &(x, y) in points {
        if !(x > 0.0 && y > 0.0) || !x.is_finite() || !y.is_finite() {
            return Err(HarnessError::Invalid(format!(
                "log-log fit needs positive values, got ({x}, {y})"
            )));
        }
        pts.push((x.ln(), y.ln()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return Err(HarnessError::Invalid("all abscissae coincide".into()));
    }
    Ok(sxy / sxx)
}

/// Per-head slope of `log δ^t` against `log t` over logged slots in
/// `[t_min, t_max]`, averaged across heads.
pub fn fit_convergence_slope(
    trace: &RunTrace,
    t_min: usize,
    t_max: usize,
) -> Result<f64, HarnessError> {
    let mut per_head: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for r in trace
        .rows
        .iter()
        .filter(|r| r.t >= t_min.max(1) && r.t <= t_max)
    {
        let delta = r.delta.ok_or_else(|| {
            HarnessError::Invalid(format!("slot {} head {} has no delta", r.t, r.head))
        })?;
        if !(delta > 0.0) {
            return Err(HarnessError::Invalid(format!(
                "non-positive delta {delta} at slot {} head {}",
                r.t, r.head
            )));
        }
        per_head
            .entry(r.head)
            .or_default()
            .push((r.t as f64, delta));
    }
    if per_head.is_empty() {
        return Err(HarnessError::Invalid(format!(
            "no logged slots in [{t_min}, {t_max}]"
        )));
    }
    let slopes = per_head
        .values()
        .map(|pts| log_log_slope(pts))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(slopes.iter().sum::<f64>() / slopes.len() as f64)
}

/// A trace whose rows carry the seed-average of every numeric column,
/// matched on `(t, head)`. All inputs must share their logging cadence.
pub fn average_traces(traces: &[RunTrace]) -> Result<RunTrace, HarnessError> {
    let first = traces
        .first()
        .ok_or_else(|| HarnessError::Invalid("no traces to average".into()))?;
    let n = traces.len() as f64;
    for tr in traces {
        if tr.rows.len() != first.rows.len()
            || tr
                .rows
                .iter()
                .zip(&first.rows)
                .any(|(a, b)| a.t != b.t || a.head != b.head)
        {
            return Err(HarnessError::Invalid(
                "traces have different logging cadences".into(),
            ));
        }
    }
    let mean = |i: usize, pick: fn(&MetricsRow) -> Option<f64>| -> Option<f64> {
        let vals: Option<Vec<f64>> = traces.iter().map(|tr| pick(&tr.rows[i])).collect();
        vals.map(|v| v.iter().sum::<f64>() / n)
    };
    let rows = (0..first.rows.len())
        .map(|i| MetricsRow {
            delta: mean(i, |r| r.delta),
            loss: mean(i, |r| r.loss),
            accuracy: mean(i, |r| r.accuracy),
            p_t: mean(i, |r| r.p_t),
            q_t: mean(i, |r| r.q_t),
            max_uplink_energy: mean(i, |r| r.max_uplink_energy),
            max_consensus_energy: mean(i, |r| r.max_consensus_energy),
            ..first.rows[i].clone()
        })
        .collect();
    Ok(RunTrace {
        rows,
        snapshots: Vec::new(),
        ..first.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundViolation {
    pub t: usize,
    pub head: usize,
    pub delta: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DominanceReport {
    pub checked: usize,
    pub violations: Vec<BoundViolation>,
    /// Largest `δ / bound` over checked points.
    pub worst_ratio: f64,
}

impl DominanceReport {
    pub fn dominated(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Compares each head's (seed-averaged) `δ^t` with that head's bound curve.
/// `delta0` holds the realized initial distance of each averaged run; the
/// curve used is the mean of the per-run bounds.
pub fn check_bound_dominance(
    trace: &RunTrace,
    constants: &TheoremConstants,
    delta0: &[f64],
) -> DominanceReport {
    let mut report = DominanceReport {
        checked: 0,
        violations: Vec::new(),
        worst_ratio: 0.0,
    };
    if delta0.is_empty() {
        return report;
    }
    for r in &trace.rows {
        let (Some(delta), Some(head)) = (r.delta, constants.heads.get(r.head)) else {
            continue;
        };
        let bound = delta0
            .iter()
            .map(|&d0| constants.bound_with(head.q1, r.t, d0))
            .sum::<f64>()
            / delta0.len() as f64;
        report.checked += 1;
        report.worst_ratio = report.worst_ratio.max(delta / bound);
        if delta > bound {
            report.violations.push(BoundViolation {
                t: r.t,
                head: r.head,
                delta,
                bound,
            });
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocols::ProtocolKind;
    use crate::ParamVector;

    fn trace(f: impl Fn(usize, usize) -> f64, heads: usize) -> RunTrace {
        let rows = (1..=400)
            .flat_map(|t| {
                let f = &f;
                (0..heads).map(move |h| MetricsRow {
                    t,
                    head: h,
                    delta: Some(f(t, h)),
                    loss: None,
                    accuracy: None,
                    channel_uses: 0,
                    p_t: None,
                    q_t: None,
                    max_uplink_energy: None,
                    max_consensus_energy: None,
                })
            })
            .collect();
        RunTrace {
            protocol: ProtocolKind::Cwfl,
            seed: 0,
            rows,
            initial: ParamVector::zeros(1),
            final_heads: vec![],
            final_clients: vec![],
            aggregation_slots: 0,
            total_channel_uses: 0,
            saturated_slots: 0,
            precode_order_violations: 0,
            snapshots: vec![],
        }
    }

    #[test]
    fn exact_power_law() {
        let s = fit_convergence_slope(&trace(|t, _| 5.0 / t as f64, 3), 10, 400).unwrap();
        assert!((s + 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_has_zero_slope() {
        let s = fit_convergence_slope(&trace(|_, h| 2.0 + h as f64, 2), 1, 400).unwrap();
        assert!(s.abs() < 1e-12);
    }

    #[test]
    fn slopes_average_over_heads() {
        let s =
            fit_convergence_slope(&trace(|t, h| (t as f64).powf(-(h as f64)), 3), 1, 400).unwrap();
        assert!((s + 1.0).abs() < 1e-9);
    }

    #[test]
    fn non_positive_delta_rejected() {
        assert!(
            fit_convergence_slope(&trace(|t, _| if t == 50 { 0.0 } else { 1.0 }, 1), 1, 400)
                .is_err()
        );
        assert!(fit_convergence_slope(&trace(|t, _| 1.0 / t as f64, 1), 500, 600).is_err());
    }

    #[test]
    fn averaging_matches_by_slot() {
        let a = trace(|t, _| t as f64, 2);
        let b = trace(|t, _| 3.0 * t as f64, 2);
        let m = average_traces(&[a, b]).unwrap();
        assert_eq!(m.rows[10].delta, Some(2.0 * m.rows[10].t as f64));
    }
}
