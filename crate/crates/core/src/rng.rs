//! Named random streams split off one root seed.
//!
//! Every consumer of randomness draws from its own ChaCha stream, so adding
//! draws in one component never shifts the numbers seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Env = 1,
    Init = 2,
    ActionNoise = 3,
    Replay = 4,
    Eval = 5,
    /// Noise for the reparameterized samples inside gradient updates.
    Update = 6,
}

pub fn stream(seed: u64, which: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
