//! The acceptance suite: ten pass/fail checks over the whole simulator.
//!
//! Each check builds its own configuration, runs it, and compares against
//! a reference computed here independently of the protocol engine.

use std::fmt;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::ExperimentConfig;
use super::experiment::{protocol_config, run_experiment, ExperimentResult};
use super::ledger::channel_ledger;
use super::slope::{average_traces, check_bound_dominance, fit_convergence_slope};
use super::HarnessError;
use crate::channel::{effective_noise_variance, per_link_noise};
use crate::objectives::{
    batch_loss, local_gradient, BatchSampler, Instance, ModelSpec, ProxConfig,
};
use crate::protocols::{run_protocol, ProtocolKind, RunTrace};
use crate::rng::{stream, StreamKind};
use crate::ParamVector;

pub const CRITERIA: [(u8, &str); 10] = [
    (1, "power budgets"),
    (2, "per-link noise variance"),
    (3, "noiseless reduction"),
    (4, "convergence rate"),
    (5, "bound dominance"),
    (6, "channel-use ledger"),
    (7, "accuracy ordering"),
    (8, "proximal benefit"),
    (9, "snr-gap rounds to target"),
    (10, "gradient correctness"),
];

/// Constant step size used by the classification checks.
pub const CLASSIFIER_LR: f64 = 0.5;
/// Accuracy the SNR-gap check measures time-to-reach against.
pub const SNR_GAP_TARGET: f64 = 0.8;

#[derive(Debug, Clone)]
pub struct Outcome {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "[{status}] criterion {:>2} {:<26} {} ({:.1}s)",
            self.id,
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

/// Runs one criterion. Errors are reported as failures.
pub fn run_criterion(id: u8) -> Result<Outcome, HarnessError> {
    let name = CRITERIA
        .iter()
        .find(|(i, _)| *i == id)
        .map(|(_, n)| *n)
        .ok_or_else(|| HarnessError::Invalid(format!("no acceptance criterion {id}")))?;
    let start = Instant::now();
    let result = match id {
        1 => power_budgets(),
        2 => per_link_variance(),
        3 => noiseless_reduction(),
        4 => convergence_rate(),
        5 => bound_dominance(),
        6 => channel_ledger_counts(),
        7 => accuracy_ordering(),
        8 => proximal_benefit(),
        9 => snr_gap(),
        _ => gradient_correctness(),
    };
    let (passed, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
    Ok(Outcome {
        id,
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
    })
}

pub fn run_all() -> Vec<Outcome> {
    CRITERIA
        .iter()
        .filter_map(|&(id, _)| run_criterion(id).ok())
        .collect()
}

type Check = Result<(bool, String), HarnessError>;

fn parse(src: &str) -> Result<ExperimentConfig, HarnessError> {
    Ok(ExperimentConfig::from_toml(src, "<acceptance>")?)
}

fn seed_list(n: u64) -> String {
    (1..=n)
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

fn quadratic_source(
    protocols: &str,
    seeds: u64,
    clusters: usize,
    epochs: usize,
    steps: usize,
    extra: &str,
) -> String {
    format!(
        r#"
[experiment]
protocols = [{protocols}]
seeds = [{seeds}]

[data]
source = "quadratic"
seed = 7
per_client = 200
features = 10
heterogeneity = 0.5

[model]
kind = "ridge"
l2 = 0.1

[training]
clients = 25
clusters = {clusters}
epochs = {epochs}
steps = {steps}
batch_size = 8
learning_rate = "theorem"

[channel]
{extra}
"#,
        seeds = seed_list(seeds)
    )
}

fn digits_source(protocols: &str, classes_per_client: usize, channel: &str) -> String {
    format!(
        r#"
[experiment]
protocols = [{protocols}]
seeds = [{seeds}]

[data]
source = "mnist"
seed = 7
classes_per_client = {classes_per_client}

[model]
kind = "logistic"
l2 = 0.001

[training]
clients = 25
clusters = 4
epochs = 3
steps = 150
batch_size = 16
learning_rate = {CLASSIFIER_LR}
prox_lambda = 0.1

[channel]
{channel}
"#,
        seeds = seed_list(5)
    )
}

fn power_budgets() -> Check {
    let (p1, p2) = (2.0, 0.5);
    let cfg = parse(&quadratic_source(
        "\"cwfl\"",
        1,
        4,
        2,
        100,
        &format!("p1 = {p1}\np2 = {p2}\nsnr_db = 10.0"),
    ))?;
    let res = run_experiment(&cfg)?;
    let tr = &res.traces[0];
    let (mut up, mut cons) = (0.0f64, 0.0f64);
    for r in tr.rows.iter().filter(|r| r.t > 0) {
        up = up.max(r.max_uplink_energy.unwrap_or(f64::INFINITY) / p1);
        cons = cons.max(r.max_consensus_energy.unwrap_or(f64::INFINITY) / p2);
    }
    let tol = 1.0 + 1e-9;
    let passed = tr.aggregation_slots >= 50 && up <= tol && cons <= tol;
    Ok((
        passed,
        format!(
            "{} slots, max uplink energy/P1 = {up:.12}, max consensus energy/P2 = {cons:.12}",
            tr.aggregation_slots
        ),
    ))
}

fn per_link_variance() -> Check {
    let cases: [(&[f64], &[f64], f64); 3] = [
        (&[0.0, 0.5, 0.5], &[1.0, 2.0, 4.0], 3.0),
        (&[0.25, 0.0, 0.75], &[2.0, 9.0, 0.4], 0.8),
        (
            &[1.0 / 3.0, 1.0 / 3.0, 0.0, 1.0 / 3.0],
            &[0.5, 1.5, 7.0, 1.0],
            1.0,
        ),
    ];
    let trials = 100_000;
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (i, (row, sigma2, expected)) in cases.iter().enumerate() {
        let reported = effective_noise_variance(row, sigma2)?;
        let mut rng = stream(2024, StreamKind::LinkNoise, &[i as u64]);
        let mut sum_sq = 0.0;
        for _ in 0..trials {
            let v = per_link_noise(1, row, sigma2, &mut rng)?;
            sum_sq += v.as_slice()[0].powi(2);
        }
        let empirical = sum_sq / trials as f64;
        let err = (empirical - expected).abs() / expected;
        worst = worst.max(err).max((reported - expected).abs() / expected);
        parts.push(format!("{expected}: {empirical:.4}"));
    }
    Ok((
        worst <= 0.03,
        format!("{} (worst rel err {worst:.4})", parts.join(", ")),
    ))
}

/// Plain federated averaging replayed from the same batch streams as the
/// engine, returning the global model after each aggregation.
fn fedavg_reference(
    cfg: &crate::protocols::ProtocolConfig,
    initial: &ParamVector,
) -> Result<Vec<ParamVector>, HarnessError> {
    let k = cfg.shards.len();
    let mut samplers: Vec<BatchSampler> = (0..k)
        .map(|i| {
            BatchSampler::new(
                cfg.shards[i].size(),
                cfg.batch_size,
                stream(cfg.seed, StreamKind::Batch, &[i as u64]),
            )
        })
        .collect();
    let mut clients = vec![initial.clone(); k];
    let mut globals = Vec::new();
    for t in 0..cfg.schedule.steps {
        let eta = cfg.learning_rate.eta(t);
        for (i, client) in clients.iter_mut().enumerate() {
            let batch: Vec<&Instance> = samplers[i]
                .next_batch()
                .iter()
                .map(|&j| &cfg.shards[i].instances[j])
                .collect();
            let g = local_gradient(&cfg.model, client, &batch, None)?;
            client.axpy(-eta, &g);
        }
        if cfg.schedule.contains(t + 1) {
            let mut avg = ParamVector::zeros(initial.len());
            for c in &clients {
                avg.axpy(1.0 / k as f64, c);
            }
            clients = vec![avg.clone(); k];
            globals.push(avg);
        }
    }
    Ok(globals)
}

fn noiseless_reduction() -> Check {
    let cfg = parse(&quadratic_source(
        "\"cwfl\"",
        1,
        1,
        2,
        60,
        "decode = \"normalized\"",
    ))?;
    let problem = super::experiment::build_problem(&cfg)?;
    let mut cw = protocol_config(&cfg, &problem, None, ProtocolKind::Cwfl, 3)?;
    cw.learning_rate = crate::protocols::LearningRate::Constant(0.05);
    cw.record_snapshots = true;
    let mut co = cw.clone();
    co.kind = ProtocolKind::Cotaf;
    let a = run_protocol(&cw)?;
    let b = run_protocol(&co)?;
    let reference = fedavg_reference(&cw, &a.initial)?;
    let mut worst_cotaf = 0.0f64;
    let mut worst_ref = 0.0f64;
    for ((sa, sb), g) in a.snapshots.iter().zip(&b.snapshots).zip(&reference) {
        worst_cotaf = worst_cotaf.max(max_coord_diff(&sa.bar[0], &sb.bar[0]));
        worst_ref = worst_ref.max(max_coord_diff(&sa.bar[0], g));
    }
    let rounds = a.snapshots.len();
    let passed = rounds == 30
        && b.snapshots.len() == 30
        && reference.len() == 30
        && worst_cotaf <= 1e-9
        && worst_ref <= 1e-9;
    Ok((passed, format!("{rounds} rounds, max |cwfl-cotaf| = {worst_cotaf:.2e}, max |cwfl-fedavg| = {worst_ref:.2e}")))
}

fn max_coord_diff(a: &ParamVector, b: &ParamVector) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

const RATE_SEEDS: u64 = 20;
const RATE_STEPS: usize = 10_000;

fn rate_experiment(precoding: &str) -> Result<ExperimentResult, HarnessError> {
    let cfg = parse(&quadratic_source(
        "\"cwfl\"",
        RATE_SEEDS,
        4,
        5,
        RATE_STEPS,
        &format!("snr_db = 10.0\nprecoding = \"{precoding}\""),
    ))?;
    run_experiment(&cfg)
}

fn cwfl_traces(res: &ExperimentResult) -> Vec<RunTrace> {
    res.traces_of(ProtocolKind::Cwfl)
        .into_iter()
        .cloned()
        .collect()
}

fn convergence_rate() -> Check {
    let res = rate_experiment("bound")?;
    let traces = cwfl_traces(&res);
    let slopes = traces
        .iter()
        .map(|t| fit_convergence_slope(t, 100, RATE_STEPS))
        .collect::<Result<Vec<_>, _>>()?;
    let mean = slopes.iter().sum::<f64>() / slopes.len() as f64;
    let of_mean = fit_convergence_slope(&average_traces(&traces)?, 100, RATE_STEPS)?;
    let genie = rate_experiment("genie")
        .and_then(|r| fit_convergence_slope(&average_traces(&cwfl_traces(&r))?, 100, RATE_STEPS))
        .map_or_else(|e| format!("error: {e}"), |s| format!("{s:.3}"));
    let passed = (-1.3..=-0.7).contains(&mean);
    Ok((
        passed,
        format!(
            "mean slope over {} seeds {mean:.3} (slope of mean trace {of_mean:.3}; genie precoding, informational: {genie})",
            slopes.len()
        ),
    ))
}

fn bound_dominance() -> Check {
    let res = rate_experiment("bound")?;
    let cal = res
        .calibration
        .as_ref()
        .ok_or_else(|| HarnessError::Invalid("missing calibration".into()))?;
    let traces = cwfl_traces(&res);
    let delta0 = traces
        .iter()
        .map(|t| t.rows.first().and_then(|r| r.delta))
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| HarnessError::Invalid("missing initial distance".into()))?;
    let report = check_bound_dominance(&average_traces(&traces)?, &cal.theorem, &delta0);
    Ok((
        report.dominated() && report.checked > 0,
        format!(
            "{} points checked, {} above the bound, max delta/bound = {:.3e} (G = {:.3}, A = {:.3e}, Q1 = {:.3e})",
            report.checked,
            report.violations.len(),
            report.worst_ratio,
            cal.gradient.g,
            cal.theorem.max_a(),
            cal.theorem.worst_q1()
        ),
    ))
}

fn channel_ledger_counts() -> Check {
    let cfg = parse(&quadratic_source(
        "\"cwfl\", \"cotaf\", \"dsgd\"",
        1,
        4,
        2,
        100,
        "snr_db = 10.0",
    ))?;
    let res = run_experiment(&cfg)?;
    let mut passed = true;
    let mut parts = Vec::new();
    let table = channel_ledger(25, 4, 50)?;
    for (kind, per_slot, total) in [
        (ProtocolKind::Cwfl, 16u64, 800u64),
        (ProtocolKind::Cotaf, 1, 50),
        (ProtocolKind::Dsgd, 600, 30_000),
    ] {
        let tr = res.traces_of(kind)[0];
        let mut prev = 0;
        let mut uniform = true;
        for t in tr.logged_slots().into_iter().filter(|&t| t > 0) {
            let uses = tr.rows_at(t).map(|r| r.channel_uses).max().unwrap_or(0);
            uniform &= uses - prev == per_slot;
            prev = uses;
        }
        let line = table.iter().find(|l| l.protocol == kind);
        let table_ok = line.is_some_and(|l| l.per_slot == per_slot && l.total == total);
        let ok =
            uniform && tr.aggregation_slots == 50 && tr.total_channel_uses == total && table_ok;
        passed &= ok;
        parts.push(format!("{kind} {}", tr.total_channel_uses));
    }
    Ok((passed, format!("over 50 slots: {}", parts.join(", "))))
}

fn mean_accuracy(res: &ExperimentResult, kind: ProtocolKind) -> Result<f64, HarnessError> {
    res.mean_final_accuracy(kind)
        .ok_or_else(|| HarnessError::Invalid(format!("{kind} logged no accuracy")))
}

fn accuracy_ordering() -> Check {
    let cfg = parse(&digits_source(
        "\"cwfl\", \"cotaf\", \"local-only\"",
        4,
        "snr_db = 10.0",
    ))?;
    let res = run_experiment(&cfg)?;
    let cwfl = mean_accuracy(&res, ProtocolKind::Cwfl)?;
    let cotaf = mean_accuracy(&res, ProtocolKind::Cotaf)?;
    let local = mean_accuracy(&res, ProtocolKind::LocalOnly)?;
    let passed = cwfl >= cotaf - 0.02 && cwfl >= local + 0.05 && cotaf >= local + 0.05;
    Ok((
        passed,
        format!(
            "cwfl {:.2}%, cotaf {:.2}%, local-only {:.2}% ({})",
            100.0 * cwfl,
            100.0 * cotaf,
            100.0 * local,
            res.problem.data_origin
        ),
    ))
}

fn proximal_benefit() -> Check {
    let cfg = parse(&digits_source(
        "\"cwfl\", \"cwfl-prox\"",
        2,
        "snr_db = 10.0",
    ))?;
    let res = run_experiment(&cfg)?;
    let plain = mean_accuracy(&res, ProtocolKind::Cwfl)?;
    let prox = mean_accuracy(&res, ProtocolKind::CwflProx)?;
    Ok((
        prox >= plain,
        format!(
            "cwfl-prox {:.2}% vs cwfl {:.2}% (lambda 0.1)",
            100.0 * prox,
            100.0 * plain
        ),
    ))
}

/// Aggregation rounds until the head-mean accuracy first reaches `target`,
/// or one past the last round if it never does.
fn rounds_to_target(trace: &RunTrace, epochs: usize, target: f64) -> usize {
    trace
        .logged_slots()
        .into_iter()
        .find(|&t| {
            trace
                .mean_at(t, |r| r.accuracy)
                .is_some_and(|a| a >= target)
        })
        .map_or(trace.aggregation_slots + 1, |t| t.div_ceil(epochs))
}

fn snr_gap() -> Check {
    let cfg = parse(&digits_source(
        "\"cwfl\", \"cotaf\"",
        4,
        "snr_db = 10.0\nhead_snr_db = 11.0",
    ))?;
    let res = run_experiment(&cfg)?;
    let epochs = cfg.training.epochs;
    let mean_rounds = |kind| {
        let tr = res.traces_of(kind);
        tr.iter()
            .map(|t| rounds_to_target(t, epochs, SNR_GAP_TARGET) as f64)
            .sum::<f64>()
            / tr.len() as f64
    };
    let cwfl = mean_rounds(ProtocolKind::Cwfl);
    let cotaf = mean_rounds(ProtocolKind::Cotaf);
    Ok((
        cwfl <= cotaf,
        format!(
            "mean rounds to {:.0}%: cwfl {cwfl:.1}, cotaf {cotaf:.1}",
            100.0 * SNR_GAP_TARGET
        ),
    ))
}

fn random_spec(rng: &mut impl Rng, draw: usize) -> Result<ModelSpec, HarnessError> {
    let m = rng.random_range(1..6);
    // Convex models require a positive l2 term; the MLP also accepts zero.
    let l2 = rng.random_range(1e-3..0.5);
    let mlp_l2 = if rng.random_bool(0.5) { 0.0 } else { l2 };
    Ok(match draw % 3 {
        0 => ModelSpec::ridge(m, l2)?,
        1 => ModelSpec::logistic(m, rng.random_range(2..5), l2)?,
        _ => ModelSpec::mlp(m, rng.random_range(1..5), rng.random_range(2..4), mlp_l2)?,
    })
}

fn normal_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let x: f64 = rng.sample(StandardNormal);
            scale * x
        })
        .collect()
}

fn random_batch(rng: &mut impl Rng, spec: &ModelSpec) -> Vec<Instance> {
    let m = spec.features;
    let classes = spec.is_classifier().then_some(spec.classes);
    let n = rng.random_range(1..7);
    (0..n)
        .map(|_| {
            let z = normal_vec(rng, m, 1.0);
            let y = match classes {
                Some(c) => rng.random_range(0..c) as f64,
                None => StandardNormal.sample(rng),
            };
            Instance::new(z, y)
        })
        .collect()
}

/// Relative error between the analytic gradient and central differences.
pub fn finite_difference_error(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &[&Instance],
    prox: Option<&ProxConfig>,
) -> Result<f64, HarnessError> {
    let analytic = local_gradient(spec, params, batch, prox)?;
    let h = 1e-5;
    let mut numeric = ParamVector::zeros(params.len());
    for i in 0..params.len() {
        let mut plus = params.clone();
        plus.as_mut_slice()[i] += h;
        let mut minus = params.clone();
        minus.as_mut_slice()[i] -= h;
        numeric.as_mut_slice()[i] = (batch_loss(spec, &plus, batch, prox)?
            - batch_loss(spec, &minus, batch, prox)?)
            / (2.0 * h);
    }
    let scale = analytic.norm().max(numeric.norm()).max(1e-8);
    Ok(analytic.dist_sq(&numeric).sqrt() / scale)
}

fn gradient_correctness() -> Check {
    let mut rng = stream(99, StreamKind::Data, &[10]);
    let draws = 150;
    let mut worst = 0.0f64;
    let mut with_prox = 0;
    for draw in 0..draws {
        let spec = random_spec(&mut rng, draw)?;
        let params = ParamVector::new(normal_vec(&mut rng, spec.dim(), 0.5));
        let data = random_batch(&mut rng, &spec);
        let batch: Vec<&Instance> = data.iter().collect();
        let prox = if draw % 2 == 0 {
            with_prox += 1;
            let anchor = ParamVector::new(normal_vec(&mut rng, spec.dim(), 0.5));
            Some(ProxConfig::new(rng.random_range(0.01..2.0), anchor)?)
        } else {
            None
        };
        worst = worst.max(finite_difference_error(
            &spec,
            &params,
            &batch,
            prox.as_ref(),
        )?);
    }
    Ok((
        worst < 1e-6,
        format!("{draws} draws ({with_prox} with prox), worst relative error {worst:.2e}"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_criterion_is_rejected() {
        assert!(run_criterion(11).is_err());
        assert!(run_criterion(0).is_err());
    }

    #[test]
    fn rounds_to_target_counts_rounds() {
        use crate::protocols::MetricsRow;
        let row = |t, acc| MetricsRow {
            t,
            head: 0,
            delta: None,
            loss: None,
            accuracy: Some(acc),
            channel_uses: 0,
            p_t: None,
            q_t: None,
            max_uplink_energy: None,
            max_consensus_energy: None,
        };
        let trace = RunTrace {
            protocol: ProtocolKind::Cotaf,
            seed: 0,
            rows: vec![row(0, 0.1), row(3, 0.5), row(6, 0.85), row(9, 0.9)],
            initial: ParamVector::zeros(1),
            final_heads: vec![],
            final_clients: vec![],
            aggregation_slots: 3,
            total_channel_uses: 3,
            saturated_slots: 0,
            precode_order_violations: 0,
            snapshots: vec![],
        };
        assert_eq!(rounds_to_target(&trace, 3, 0.8), 2);
        assert_eq!(rounds_to_target(&trace, 3, 0.95), 4);
    }

    #[test]
    fn finite_differences_flag_a_wrong_gradient() {
        let spec = ModelSpec::ridge(2, 0.1).unwrap();
        let data = [Instance::new(vec![1.0, 2.0], 3.0)];
        let batch: Vec<&Instance> = data.iter().collect();
        let params = ParamVector::new(vec![0.3, -0.2]);
        assert!(finite_difference_error(&spec, &params, &batch, None).unwrap() < 1e-8);
        // A prox anchor changes the loss; dropping it from the gradient
        // must be visible.
        let prox = ProxConfig::new(1.0, ParamVector::new(vec![5.0, 5.0])).unwrap();
        let analytic = local_gradient(&spec, &params, &batch, None).unwrap();
        let with = local_gradient(&spec, &params, &batch, Some(&prox)).unwrap();
        assert!(analytic.dist_sq(&with) > 1.0);
    }
}
