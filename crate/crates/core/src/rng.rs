//! Counter-keyed random streams.
//!
//! Every consumer draws from a ChaCha stream selected by `(seed, stream)`, so a
//! draw index maps to the same numbers regardless of how work is split across
//! threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
