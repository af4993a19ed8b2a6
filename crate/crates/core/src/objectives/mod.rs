//! Datasets, sharding and the learning objectives.

pub mod data;
pub mod digits;
pub mod idx;
pub mod model;
pub mod optimum;
pub mod sampler;

use thiserror::Error;

pub use data::{
    generate_synthetic_quadratic, read_instances, shard_by_label_skew, write_instances,
    ClientShard, Dataset, Instance,
};
pub use digits::{generate_digits, DigitsConfig};
pub use idx::{parse_idx, IdxError, IdxTensor};
pub use model::{
    accuracy, batch_loss, global_gradient, global_objective, local_gradient, local_loss, sgd_step,
    ModelKind, ModelSpec, ProxConfig,
};
pub use optimum::{quadratic_constants_and_optimum, QuadraticConstants};
pub use sampler::BatchSampler;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("invalid sizing: {0}")]
    Sizing(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("instance {index} has invalid class label {label}")]
    Label { index: usize, label: f64 },
    #[error("client {0} has an empty shard")]
    EmptyShard(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("normal equations are singular")]
    Singular,
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
}
