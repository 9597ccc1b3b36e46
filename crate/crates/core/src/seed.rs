//! Positional seed derivation.
//!
//! Every stochastic step takes a seed derived from a base seed and a path of
//! indices (replication, parameter value, resample, ...). Derivation is a
//! SplitMix64 chain, so seeds do not depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `base` and a path of indices.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(base.wrapping_add(GOLDEN)), |acc, &i| {
        mix(acc ^ mix(i.wrapping_add(GOLDEN).wrapping_mul(GOLDEN)))
    })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Named streams used inside one replication.
pub(crate) mod stream {
    pub const SIMULATE: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const FIT: u64 = 3;
    pub const BOOTSTRAP: u64 = 4;
    pub const COVARIATES: u64 = 5;
}
