//! Seed derivation. Every random stream in the crate is keyed from a root
//! seed plus a path of integers, so results do not depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `seed` with `key` into a 64-bit value.
pub fn derive(seed: u64, key: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for &k in key {
        h = splitmix64(h ^ splitmix64(k));
    }
    h
}

/// Uniform draw in `[0, 1)` addressed by `(seed, key)`.
pub fn keyed_uniform(seed: u64, key: &[u64]) -> f64 {
    (derive(seed, key) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// A ChaCha stream addressed by `(seed, key)`.
pub fn stream(seed: u64, key: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, key))
}

/// Subsystem labels for splitting the root seed.
pub mod domain {
    pub const SEGMENT: u64 = 1;
    pub const POLICY_INIT: u64 = 2;
    pub const PM_INIT: u64 = 3;
    pub const PM_TRAIN: u64 = 4;
    pub const NEGATIVES: u64 = 5;
    pub const TRAIN: u64 = 6;
    pub const SAMPLE: u64 = 7;
}
