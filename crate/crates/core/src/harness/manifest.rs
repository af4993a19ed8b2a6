//! Run manifest: everything needed to reproduce a set of traces.

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::experiment::ExperimentResult;
use super::theorem::HeadConstants;
use super::HarnessError;

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub protocol: String,
    pub seed: u64,
    pub aggregation_slots: usize,
    pub total_channel_uses: u64,
    pub saturated_slots: usize,
    pub precode_order_violations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationSummary {
    pub grad_bound: f64,
    pub lipschitz: f64,
    pub strong_convexity: f64,
    pub gamma_gap: f64,
    pub gamma: f64,
    pub max_a: f64,
    pub alpha2: Vec<f64>,
    pub heads: Vec<HeadConstants>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub protocols: Vec<String>,
    pub data_origin: String,
    pub model_dim: usize,
    pub clients: usize,
    pub clusters: usize,
    /// `assignment[k]` is client `k`'s cluster.
    pub assignment: Vec<usize>,
    pub cluster_sizes: Vec<usize>,
    pub mixing: Vec<Vec<f64>>,
    pub config: ExperimentConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationSummary>,
    pub runs: Vec<RunSummary>,
}

pub fn config_hash(source: &[u8]) -> String {
    hex::encode(Sha256::digest(source))
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig, config_source: &[u8], result: &ExperimentResult) -> Self {
        let p = &result.problem;
        let runs = result
            .traces
            .iter()
            .map(|t| RunSummary {
                protocol: t.protocol.to_string(),
                seed: t.seed,
                aggregation_slots: t.aggregation_slots,
                total_channel_uses: t.total_channel_uses,
                saturated_slots: t.saturated_slots,
                precode_order_violations: t.precode_order_violations,
                final_delta: t.mean_at(t.final_slot(), |r| r.delta),
                final_accuracy: t.final_accuracy(),
            })
            .collect();
        let calibration = result.calibration.as_ref().map(|c| CalibrationSummary {
            grad_bound: c.gradient.g,
            lipschitz: c.theorem.lipschitz,
            strong_convexity: c.theorem.mu,
            gamma_gap: c.theorem.gamma_gap,
            gamma: c.theorem.gamma,
            max_a: c.theorem.max_a(),
            alpha2: c.gradient.alpha2.clone(),
            heads: c.theorem.heads.clone(),
        });
        Self {
            config_sha256: config_hash(config_source),
            seeds: cfg.experiment.seeds.clone(),
            protocols: cfg
                .experiment
                .protocols
                .iter()
                .map(|k| k.to_string())
                .collect(),
            data_origin: p.data_origin.clone(),
            model_dim: p.model.dim(),
            clients: p.layout.num_clients(),
            clusters: p.layout.num_clusters(),
            assignment: (0..p.layout.num_clients())
                .map(|k| p.layout.cluster_of(k))
                .collect(),
            cluster_sizes: p.layout.sizes(),
            mixing: p.mixing.rows().to_vec(),
            config: cfg.clone(),
            calibration,
            runs,
        }
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self)
            .map_err(|e| HarnessError::Invalid(format!("manifest serialization: {e}")))
    }
}
