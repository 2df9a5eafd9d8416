//! Keyed random substreams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator seeded by
//! mixing a master seed with a small tuple of keys (purpose, epoch, trial
//! index, ...). A draw therefore depends only on its key, never on the order
//! in which parallel workers reach it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags used as the first key of a substream.
pub mod purpose {
    pub const DATA: u64 = 0x01;
    pub const AUGMENT: u64 = 0x02;
    pub const INIT: u64 = 0x03;
    pub const BOOTSTRAP: u64 = 0x04;
    pub const SPLIT: u64 = 0x05;
    pub const PHASE1: u64 = 0x06;
    pub const PHASE2: u64 = 0x07;
}

/// SplitMix64 finalizer.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a 64-bit seed from `seed` and an ordered list of keys.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k.wrapping_add(0xA076_1D64_78BD_642F))))
}

/// Generator for the substream `(seed, keys...)`.
pub fn substream(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, keys))
}
