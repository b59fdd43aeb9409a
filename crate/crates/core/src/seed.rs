//! Deterministic derivation of independent RNG streams from a base seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `base` with a path of stream identifiers into a new seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}

/// Stream labels, so that different consumers of one base seed never share a stream.
pub mod stream {
    pub const PLACE_LAYOUT: u64 = 1;
    pub const PALETTE: u64 = 2;
    pub const REFERENCE_NOISE: u64 = 3;
    pub const QUERY_NOISE: u64 = 4;
    pub const QUERY_JITTER: u64 = 5;
    pub const AUGMENT: u64 = 10;
    pub const BATCH_ORDER: u64 = 11;
    pub const RANDOM_NEGATIVES: u64 = 12;
    pub const INIT: u64 = 13;
}
