//! Seed handling.
//!
//! Every random stream is a ChaCha8 generator seeded from a 64-bit value.
//! Child streams are derived with [`derive_seed`], a SplitMix64 finalizer over
//! `(parent, label)`, so a run is fully described by its root seed plus the
//! labels used along the way (sample index, epoch, step, ...).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent child seed from a parent seed and a label.
pub fn derive_seed(parent: u64, label: u64) -> u64 {
    splitmix64(splitmix64(parent) ^ label.wrapping_mul(GOLDEN))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream labels used across the crate.
pub(crate) mod label {
    pub const INIT: u64 = 1;
    pub const MC: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const PHANTOM: u64 = 5;
    pub const REFRESH: u64 = 6;
}
