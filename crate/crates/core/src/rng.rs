//! Seeded random streams.
//!
//! Every consumer draws from ChaCha8 (a counter-based stream cipher generator,
//! identical output on every platform) keyed by `(seed, stream)`, so unrelated
//! consumers never share a sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub mod stream {
    pub const INIT: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const REINIT: u64 = 3;
    pub const CLASS_DROP: u64 = 4;
    pub const SAMPLE: u64 = 5;
    pub const DATA: u64 = 6;
    pub const FEATURES: u64 = 7;
}

pub fn seeded(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform draw in `[0, 1)` with 53 random bits.
pub fn unit(rng: &mut StreamRng) -> f64 {
    rng.random::<f64>()
}
