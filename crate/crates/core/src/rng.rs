//! Seeded RNG streams. Every source of randomness in the crate is a
//! (seed, stream) pair so experiment stages can draw independently while
//! staying reproducible from a single configured seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
