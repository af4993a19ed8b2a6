//! Seed derivation.
//!
//! Every random stream in the simulator is a ChaCha generator keyed by the run
//! seed plus a small tuple of integers (stream kind, round, node id). Streams
//! never share state, so the order in which nodes are simulated does not
//! affect any draw.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type StreamRng = ChaCha12Rng;

/// Stream families. The discriminant is mixed into the key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum StreamKind {
    Data = 1,
    Layout = 2,
    Init = 3,
    Batch = 4,
    UplinkNoise = 5,
    ConsensusNoise = 6,
    LinkNoise = 7,
    Split = 8,
    Warmup = 9,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a key tuple into a single 64-bit seed.
pub fn derive_seed(seed: u64, kind: StreamKind, keys: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ splitmix(kind as u64));
    for &k in keys {
        h = splitmix(h ^ k.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    }
    h
}

pub fn stream(seed: u64, kind: StreamKind, keys: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, kind, keys))
}
