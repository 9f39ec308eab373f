//! Seed derivation. Every random stream in the simulator is keyed by the
//! run seed plus a fixed tag path, so results never depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a tag path into a base seed.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(seed, tags))
}

/// Stream tags, kept in one place so no two consumers collide.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SAMPLE_CLIENTS: u64 = 2;
    pub const BATCHES: u64 = 3;
    pub const MARGINALS: u64 = 4;
    pub const PEERS: u64 = 5;
    pub const DIAGNOSTICS: u64 = 6;
    pub const TEMPLATES: u64 = 7;
    pub const CLIENT_DATA: u64 = 8;
    pub const SPLIT: u64 = 9;
    pub const LABEL_SKEW: u64 = 10;
    pub const CONVEX: u64 = 11;
    pub const EVAL: u64 = 12;
}
