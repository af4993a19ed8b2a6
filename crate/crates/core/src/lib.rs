// Validation uses `!(x > 0.0)` so that NaN is rejected along with
// out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod harness;
pub mod objectives;
pub mod params;
pub mod protocols;
pub mod rng;
pub mod topology;

pub use params::ParamVector;
