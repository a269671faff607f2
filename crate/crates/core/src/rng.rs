//! Seed plumbing. Every stochastic step draws from a `ChaCha8Rng` whose seed is
//! derived from the run seed and a fixed stream tag, so results do not depend on
//! platform, thread count or call order across unrelated stages.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix64(seed ^ mix64(stream))
}

pub fn rng_from(seed: u64, stream: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

/// Stream tags for the pipeline stages.
pub mod stream {
    pub const ENCODER_INIT: u64 = 1;
    pub const DECODER_INIT: u64 = 2;
    pub const PAIRS: u64 = 3;
    pub const ENCODER_BATCHES: u64 = 4;
    pub const PREDICTOR_INIT: u64 = 5;
    pub const ESTIMATOR_SAMPLES: u64 = 6;
    pub const PREDICTOR_BATCHES: u64 = 7;
    pub const POOL: u64 = 8;
    pub const CORPUS: u64 = 9;
    pub const SPLIT: u64 = 10;
    pub const TABLE: u64 = 11;
    pub const HELD_OUT: u64 = 12;
}
