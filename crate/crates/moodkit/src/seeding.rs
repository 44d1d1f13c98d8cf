//! Deterministic RNG stream derivation. Every randomized operation keys its
//! stream by (base seed, stream tags) so results are independent of thread
//! count and evaluation order.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// splitmix64 finalizer; good avalanche for combining seed words.
#[inline]
pub fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive a child seed from a base seed and a list of stream tags.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    let mut h = mix(seed);
    for &t in tags {
        h = mix(h ^ t);
    }
    h
}

pub fn rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}
