//! Seeded random streams.
//!
//! One run seed fans out to independent ChaCha streams, one per consumer, so
//! turning a component on or off never shifts the randomness seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Synth = 1,
    Init = 2,
    KMeans = 3,
    Shuffle = 4,
    BasisCompletion = 5,
    JointShuffle = 6,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
