//! Seed plumbing. Every random draw in the crate comes from a ChaCha8 stream
//! keyed by an explicit `u64`, so results never depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent child seed for `stream` under `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix(seed ^ mix(stream.wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

/// Seed of restart `index`; restart 0 reuses the master seed.
pub fn restart_seed(master: u64, index: usize) -> u64 {
    if index == 0 {
        master
    } else {
        derive_seed(master, index as u64)
    }
}

/// Stable 64-bit FNV-1a hash, used to key seeds by names.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
