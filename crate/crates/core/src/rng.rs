//! Seed derivation. Every stochastic component draws from a ChaCha8 stream
//! keyed by a base seed and a tuple of stream identifiers, so results never
//! depend on iteration or thread order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv_bytes(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// SplitMix64 finalizer.
fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of a seed and integer stream ids.
pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    let mut h = fnv_bytes(FNV_OFFSET, &seed.to_le_bytes());
    for p in parts {
        h = fnv_bytes(h, &p.to_le_bytes());
    }
    finalize(h)
}

/// Stable hash of a string, usable as a stream id.
pub fn hash_str(s: &str) -> u64 {
    finalize(fnv_bytes(FNV_OFFSET, s.as_bytes()))
}

pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, parts))
}
