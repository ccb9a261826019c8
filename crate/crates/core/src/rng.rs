//! Named random sub-streams derived from a single run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent consumers of randomness. Each gets its own ChaCha stream so
/// that varying one (e.g. the data seed) leaves the others untouched.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Data = 2,
    Shuffle = 3,
    Test = 4,
}

/// Generator for `(seed, stream, index)`; `index` separates repeated draws
/// such as per-epoch shuffles or per-sub-net initialisation.
pub fn sub_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 40) ^ index);
    rng
}
