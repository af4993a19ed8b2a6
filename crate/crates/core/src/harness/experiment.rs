//! Turns an [`ExperimentConfig`] into protocol runs.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use super::config::{
    DataSource, ExperimentConfig, LearningRateSetting, MixingChoice, ModelChoice, PrecodingChoice,
};
use super::gradient_bound::{estimate_gradient_bound, GradientBound, WarmupOptions};
use super::theorem::{theorem_constants, TheoremConstants, TheoremInputs};
use super::HarnessError;
use crate::channel::{snr_to_variance, ChannelEnv};
use crate::objectives::idx::{dataset_from_idx, encode_idx, load_mnist_dir};
use crate::objectives::{
    generate_digits, generate_synthetic_quadratic, parse_idx, quadratic_constants_and_optimum,
    shard_by_label_skew, ClientShard, Dataset, DigitsConfig, Instance, ModelSpec,
    QuadraticConstants,
};
use crate::protocols::{
    run_protocol, schedule_aggregations, EvalContext, LearningRate, PrecodeMode, ProtocolConfig,
    ProtocolKind, RunTrace,
};
use crate::topology::{
    mixing_ring, mixing_uniform_complete, random_clusters, ClusterLayout, MixingMatrix,
};

/// Environment variable naming a directory with MNIST IDX files.
pub const DATA_DIR_ENV: &str = "OTAFL_DATA_DIR";

/// Data, model and topology shared by every run of an experiment.
#[derive(Debug, Clone)]
pub struct Problem {
    pub model: ModelSpec,
    pub shards: Arc<Vec<ClientShard>>,
    pub test: Option<Arc<Vec<Instance>>>,
    pub constants: Option<QuadraticConstants>,
    pub layout: ClusterLayout,
    pub mixing: MixingMatrix,
    /// Where the data came from, for the manifest.
    pub data_origin: String,
}

/// Gradient bound and theorem constants, computed once per experiment.
#[derive(Debug, Clone, Serialize)]
pub struct Calibration {
    pub gradient: GradientBound,
    pub theorem: TheoremConstants,
}

fn mnist_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, String), HarnessError> {
    let dir = cfg
        .data
        .dir
        .clone()
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(Into::into));
    if let Some(dir) = dir {
        let ds = load_mnist_dir(&dir)?;
        return Ok((ds, format!("idx:{}", dir.display())));
    }
    // Synthetic stand-in, serialized to IDX and parsed back so it takes the
    // same ingestion path as real files.
    let digits = DigitsConfig {
        instances: cfg.data.instances,
        ..Default::default()
    };
    let (images, labels) = generate_digits(&digits, cfg.data.seed);
    let images = parse_idx(&encode_idx(&images))?;
    let labels = parse_idx(&encode_idx(&labels))?;
    let ds = dataset_from_idx(&images, &labels, digits.classes)?;
    Ok((
        ds,
        format!(
            "synthetic-digits:{}x{}",
            digits.instances,
            digits.side * digits.side
        ),
    ))
}

pub fn build_problem(cfg: &ExperimentConfig) -> Result<Problem, HarnessError> {
    let t = &cfg.training;
    let d = &cfg.data;
    let (model, shards, test, constants, origin) = match d.source {
        DataSource::Quadratic => {
            let shards = generate_synthetic_quadratic(
                d.seed,
                t.clients,
                d.per_client,
                d.features,
                d.heterogeneity,
            )?;
            let model = ModelSpec::ridge(d.features, cfg.model.l2)?;
            let constants = quadratic_constants_and_optimum(&shards, cfg.model.l2)?;
            let origin = format!("synthetic-quadratic:{}x{}", d.per_client, d.features);
            (model, shards, None, Some(constants), origin)
        }
        DataSource::Mnist => {
            let (ds, origin) = mnist_dataset(cfg)?;
            let (train, test) = ds.split(d.test_fraction, d.seed);
            let shards = shard_by_label_skew(&train, t.clients, d.classes_per_client, d.seed)?;
            let model = match cfg.model.kind {
                ModelChoice::Mlp => ModelSpec::mlp(
                    ds.num_features,
                    cfg.model.hidden,
                    ds.num_classes,
                    cfg.model.l2,
                )?,
                _ => ModelSpec::logistic(ds.num_features, ds.num_classes, cfg.model.l2)?,
            };
            (model, shards, Some(Arc::new(test.instances)), None, origin)
        }
    };
    let layout_seed = cfg.experiment.layout_seed.unwrap_or(d.seed);
    let layout = random_clusters(t.clients, t.clusters, layout_seed)?;
    let mixing = match t.mixing {
        MixingChoice::Complete => mixing_uniform_complete(t.clusters),
        MixingChoice::Ring if t.clusters >= 3 => mixing_ring(t.clusters)?,
        // Ring only matters to clustered protocols, which validation guards.
        MixingChoice::Ring => mixing_uniform_complete(t.clusters),
    };
    Ok(Problem {
        model,
        shards: Arc::new(shards),
        test,
        constants,
        layout,
        mixing,
        data_origin: origin,
    })
}

/// Per-symbol noise variance for an SNR in dB, or zero when absent.
pub fn noise_variance(p1: f64, dim: usize, snr_db: Option<f64>) -> Result<f64, HarnessError> {
    match snr_db {
        Some(snr) => Ok(snr_to_variance(p1 / dim as f64, snr)?),
        None => Ok(0.0),
    }
}

fn base_config(
    cfg: &ExperimentConfig,
    problem: &Problem,
    kind: ProtocolKind,
    seed: u64,
) -> Result<ProtocolConfig, HarnessError> {
    let t = &cfg.training;
    let ch = &cfg.channel;
    let lr = match t.learning_rate {
        LearningRateSetting::Value(v) => LearningRate::Constant(v),
        LearningRateSetting::Named(_) => {
            let k = problem.constants.as_ref().ok_or_else(|| {
                HarnessError::Invalid("the theorem schedule needs a quadratic problem".into())
            })?;
            let mu = k.strong_convexity;
            LearningRate::Theorem {
                mu,
                gamma: (t.epochs as f64).max(12.0 * k.lipschitz / mu),
            }
        }
    };
    let mut pc = ProtocolConfig::new(
        kind,
        problem.model,
        problem.shards.clone(),
        schedule_aggregations(t.steps, t.epochs)?,
        lr,
        seed,
    )?;
    let dim = problem.model.dim();
    let snr = if kind.is_clustered() {
        ch.head_snr_db.or(ch.snr_db)
    } else {
        ch.snr_db
    };
    pc.channel = ChannelEnv::new(ch.p1, ch.p2, vec![noise_variance(ch.p1, dim, snr)?], seed)?;
    pc.layout = problem.layout.clone();
    pc.mixing = problem.mixing.clone();
    pc.prox_lambda = if kind.is_prox() { t.prox_lambda } else { 0.0 };
    pc.decode = ch.decode;
    pc.consensus_noise = ch.consensus_noise;
    pc.batch_size = t.batch_size;
    pc.eval = EvalContext {
        theta_star: problem.constants.as_ref().map(|k| k.theta_star.clone()),
        test_set: problem.test.clone(),
        log_loss: cfg.experiment.log_loss,
    };
    Ok(pc)
}

/// Estimates `G` and `α_k²` at the first seed and evaluates the theorem
/// constants for the clustered configuration. Quadratic problems only.
pub fn calibrate(cfg: &ExperimentConfig, problem: &Problem) -> Result<Calibration, HarnessError> {
    let k = problem
        .constants
        .as_ref()
        .ok_or_else(|| HarnessError::Invalid("calibration needs a quadratic problem".into()))?;
    let seed = cfg.experiment.seeds[0];
    let pc = base_config(cfg, problem, ProtocolKind::Cwfl, seed)?;
    let opts = WarmupOptions {
        safety: cfg.channel.grad_bound_safety,
        ..Default::default()
    };
    let gradient = estimate_gradient_bound(&pc, seed, opts)?;
    let head_snr = cfg.channel.head_snr_db.or(cfg.channel.snr_db);
    let sigma2 = noise_variance(cfg.channel.p1, problem.model.dim(), head_snr)?;
    let theorem = theorem_constants(&TheoremInputs {
        lipschitz: k.lipschitz,
        strong_convexity: k.strong_convexity,
        grad_bound: gradient.g,
        gamma_gap: k.gamma_gap,
        alpha2: gradient.alpha2.clone(),
        epochs: cfg.training.epochs,
        p1: cfg.channel.p1,
        p2: cfg.channel.p2,
        dim: problem.model.dim(),
        layout: problem.layout.clone(),
        mixing: problem.mixing.clone(),
        sigma2: vec![sigma2],
    })?;
    Ok(Calibration { gradient, theorem })
}

/// The fully specified run of `kind` at `seed`.
pub fn protocol_config(
    cfg: &ExperimentConfig,
    problem: &Problem,
    calibration: Option<&Calibration>,
    kind: ProtocolKind,
    seed: u64,
) -> Result<ProtocolConfig, HarnessError> {
    let mut pc = base_config(cfg, problem, kind, seed)?;
    if cfg.channel.precoding == PrecodingChoice::Bound {
        let cal = calibration
            .ok_or_else(|| HarnessError::Invalid("bound precoding needs a calibration".into()))?;
        pc.precoding = PrecodeMode::Bound {
            grad_bound: cal.gradient.g,
            consensus_a: cal.theorem.max_a(),
        };
    }
    Ok(pc)
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub problem: Problem,
    pub calibration: Option<Calibration>,
    /// Ordered by protocol list, then seed list.
    pub traces: Vec<RunTrace>,
}

impl ExperimentResult {
    pub fn traces_of(&self, kind: ProtocolKind) -> Vec<&RunTrace> {
        self.traces.iter().filter(|t| t.protocol == kind).collect()
    }

    /// Seed-mean of the final-slot accuracy.
    pub fn mean_final_accuracy(&self, kind: ProtocolKind) -> Option<f64> {
        let accs: Option<Vec<f64>> = self
            .traces_of(kind)
            .iter()
            .map(|t| t.final_accuracy())
            .collect();
        let accs = accs?;
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }
}

/// Runs every `(protocol, seed)` cell in parallel.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, HarnessError> {
    let problem = build_problem(cfg)?;
    let needs_cal = problem.constants.is_some();
    let calibration = if needs_cal {
        Some(calibrate(cfg, &problem)?)
    } else {
        None
    };
    let cells: Vec<(ProtocolKind, u64)> = cfg
        .experiment
        .protocols
        .iter()
        .flat_map(|&k| cfg.experiment.seeds.iter().map(move |&s| (k, s)))
        .collect();
    let traces = cells
        .par_iter()
        .map(|&(kind, seed)| {
            let pc = protocol_config(cfg, &problem, calibration.as_ref(), kind, seed)?;
            Ok(run_protocol(&pc)?)
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(ExperimentResult {
        problem,
        calibration,
        traces,
    })
}

/// Writes `metrics.csv` and `manifest.toml` into `dir`.
pub fn write_outputs(
    cfg: &ExperimentConfig,
    config_source: &[u8],
    result: &ExperimentResult,
    dir: &Path,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    super::report::emit_csv(&result.traces, &dir.join("metrics.csv"))?;
    let manifest = super::manifest::Manifest::new(cfg, config_source, result);
    let path = dir.join("manifest.toml");
    std::fs::write(&path, manifest.to_toml()?).map_err(|e| HarnessError::io(&path, e))?;
    Ok(())
}
