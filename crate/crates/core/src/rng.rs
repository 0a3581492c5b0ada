//! Seeded random streams.
//!
//! Every stochastic routine takes its randomness from a ChaCha8 generator
//! keyed by `(seed, stream)`. ChaCha is counter based, so distinct stream ids
//! give independent sequences from the same seed; parallel chains use their
//! chain index as the stream id and stay reproducible regardless of thread
//! scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type M3Rng = ChaCha8Rng;

pub fn stream_rng(seed: u64, stream: u64) -> M3Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
