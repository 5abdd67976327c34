//! Seeded random streams.
//!
//! Every consumer derives its own ChaCha stream from `(seed, stream)` so adding
//! draws in one place never shifts another component's randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod stream {
    pub const BACKBONE: u64 = 1;
    pub const GENERATOR: u64 = 2;
    pub const TASKS: u64 = 3;
    pub const FEATURIZER: u64 = 4;
    pub const TRAIN_DATA: u64 = 5;
    pub const EVAL_DATA: u64 = 6;
    pub const LORA_INIT: u64 = 7;
    pub const SHUFFLE: u64 = 8;
    pub const PROJECTION: u64 = 9;
    pub const KMEANS: u64 = 10;
    pub const KNN: u64 = 11;
    pub const SPECTRAL: u64 = 12;
    pub const GRADIENTS: u64 = 13;
    pub const AVG_SAMPLES: u64 = 14;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream for a sub-component indexed by `index` (a task id, a replicate, ...).
pub fn indexed(seed: u64, stream: u64, index: u64) -> Rng {
    seeded(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15), stream)
}
