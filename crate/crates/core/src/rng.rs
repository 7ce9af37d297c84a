//! Seed derivation for independent, reproducible random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Each consumer of randomness draws from its own stream so that
/// adding draws in one place never shifts another.
pub(crate) mod tag {
    pub const INIT: u64 = 1;
    pub const SERVER: u64 = 2;
    pub const CLIENT: u64 = 3;
    pub const SYNTH_MEANS: u64 = 10;
    pub const SYNTH_TRAIN: u64 = 11;
    pub const SYNTH_TEST: u64 = 12;
    pub const PARTITION: u64 = 13;
    pub const CORRUPT_SELECT: u64 = 20;
    pub const CORRUPT_CLIENT: u64 = 21;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of tags into a new 64-bit seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

/// A ChaCha8 generator seeded from `derive_seed(base, tags)`.
pub fn stream(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}
