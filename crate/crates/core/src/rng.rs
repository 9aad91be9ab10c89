//! Seeded random streams.
//!
//! Every run owns one root seed. Independent consumers (per building, per
//! epoch, per worker) take a ChaCha8 generator on their own stream id, so the
//! values a consumer sees never depend on how many other consumers ran before
//! it or on which thread it runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids reserved for the pipeline stages.
pub mod streams {
    pub const VAE_INIT: u64 = 1;
    pub const VAE_TRAIN: u64 = 2;
    pub const VAE_VALID: u64 = 3;
    pub const CLF_INIT: u64 = 4;
    pub const CLF_TRAIN: u64 = 5;
    pub const CATEGORICAL: u64 = 6;
    /// Synthetic building `i` uses stream `SYNTH_BASE + i`.
    pub const SYNTH_BASE: u64 = 1 << 32;
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
