//! Seed derivation and RNG stream layout.
//!
//! Every randomized stage takes an explicit `u64` seed. Sub-seeds are derived
//! with [`derive_seed`] so that pipeline stages draw from independent streams
//! while staying reproducible from one master seed.
//!
//! The importance estimator additionally derives one ChaCha stream per
//! (permutation, position, row) triple, so that skipping an evaluation or
//! re-ordering work across threads never shifts the draws of any other
//! evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derives a sub-seed from a master seed and a stage tag.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, then one splitmix round mixed with the master.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(master ^ splitmix64(h))
}

/// Derives an indexed sub-seed, e.g. one per repetition.
pub fn derive_seed_indexed(master: u64, tag: &str, index: u64) -> u64 {
    splitmix64(derive_seed(master, tag) ^ splitmix64(index.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

/// Stream id reserved for sampling feature permutations.
pub(crate) const PERMUTATION_STREAM: u64 = 1 << 62;

pub(crate) const MAX_PERMUTATIONS: usize = 1 << 30;
pub(crate) const MAX_FEATURES: usize = 1 << 10;
pub(crate) const MAX_ROWS: usize = 1 << 20;

/// Stream id for the Monte Carlo draws of one (permutation, position, row).
pub(crate) fn eval_stream(perm: usize, pos: usize, row: usize) -> u64 {
    debug_assert!(perm < MAX_PERMUTATIONS && pos < MAX_FEATURES && row < MAX_ROWS);
    (2 << 62) | ((perm as u64) << 30) | ((pos as u64) << 20) | row as u64
}

/// ChaCha RNG keyed by `seed` on the given stream.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
