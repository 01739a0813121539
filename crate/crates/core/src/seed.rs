//! Deterministic seed derivation.
//!
//! Every random stream in a run is a ChaCha8 generator keyed by a seed that is
//! derived from a parent seed and a stream tag, so independent components never
//! share a stream and results do not depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags used across the crate.
pub mod stream {
    pub const DATA_TRAIN: u64 = 0x11;
    pub const DATA_VAL: u64 = 0x12;
    pub const DATA_TEST: u64 = 0x13;
    pub const MODEL_INIT: u64 = 0x21;
    pub const WARMUP_INIT: u64 = 0x22;
    pub const SHUFFLE: u64 = 0x31;
    pub const WARMUP_SHUFFLE: u64 = 0x32;
    pub const SELECTION: u64 = 0x41;
    pub const REPORT: u64 = 0x42;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `parent` for the stream `tag` and position `index`.
pub fn derive(parent: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(parent ^ splitmix64(tag)).wrapping_add(index))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
