#![allow(dead_code)]

use std::sync::Arc;

use otafl::objectives::{
    generate_synthetic_quadratic, quadratic_constants_and_optimum, ClientShard, ModelSpec,
    QuadraticConstants,
};
use otafl::protocols::{schedule_aggregations, LearningRate, ProtocolConfig, ProtocolKind};
use otafl::ParamVector;

pub struct Quadratic {
    pub model: ModelSpec,
    pub shards: Arc<Vec<ClientShard>>,
    pub constants: QuadraticConstants,
}

pub fn quadratic(
    clients: usize,
    per_client: usize,
    features: usize,
    het: f64,
    seed: u64,
) -> Quadratic {
    let shards = generate_synthetic_quadratic(seed, clients, per_client, features, het).unwrap();
    let model = ModelSpec::ridge(features, 0.1).unwrap();
    let constants = quadratic_constants_and_optimum(&shards, model.l2).unwrap();
    Quadratic {
        model,
        shards: Arc::new(shards),
        constants,
    }
}

pub fn config(
    q: &Quadratic,
    kind: ProtocolKind,
    steps: usize,
    epochs: usize,
    eta: f64,
    seed: u64,
) -> ProtocolConfig {
    let mut cfg = ProtocolConfig::new(
        kind,
        q.model,
        q.shards.clone(),
        schedule_aggregations(steps, epochs).unwrap(),
        LearningRate::Constant(eta),
        seed,
    )
    .unwrap();
    cfg.batch_size = 4;
    cfg.eval.theta_star = Some(q.constants.theta_star.clone());
    cfg
}

pub fn max_coord_diff(a: &ParamVector, b: &ParamVector) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
