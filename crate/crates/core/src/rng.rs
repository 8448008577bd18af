//! Seed derivation so that every independent piece of work (an instance, an
//! episode, a query) owns its own RNG stream, independent of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes `base` with a path of stream tags into a new seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(base), |acc, &tag| {
        splitmix64(acc ^ splitmix64(tag))
    })
}

pub fn stream(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}

// Stream tags.
pub const TAG_EPISODE: u64 = 1;
pub const TAG_SUPPORT_OCCLUSION: u64 = 2;
pub const TAG_QUERY_OCCLUSION: u64 = 3;
pub const TAG_SAMPLER_NOISE: u64 = 4;
pub const TAG_INSTANCE: u64 = 5;
pub const TAG_NOISY_SUBSET: u64 = 6;
pub const TAG_TRAIN: u64 = 7;
pub const TAG_VALIDATION: u64 = 8;
pub const TAG_SPLIT: u64 = 9;
pub const TAG_SWEEP: u64 = 10;
