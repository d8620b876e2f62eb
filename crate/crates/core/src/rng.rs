//! Deterministic RNG streams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named streams so that adding a consumer never shifts another consumer's draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Shuffle = 3,
    Policy = 4,
    Baseline = 5,
    Augment = 6,
    Toy = 7,
    LabelNoise = 8,
}

pub fn stream(seed: u64, stream: Stream) -> Rng {
    stream_at(seed, stream as u64)
}

pub fn stream_at(seed: u64, id: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
