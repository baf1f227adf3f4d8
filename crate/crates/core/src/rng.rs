//! Counter-addressed random streams.
//!
//! Every stochastic consumer draws from a ChaCha8 stream keyed by
//! `(seed, purpose, counter)`, so any step can be replayed without carrying
//! generator state around.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Batch = 2,
    Dropout = 3,
    ClassDrop = 4,
    Data = 5,
    Sample = 6,
    Test = 7,
}

/// Stream for `(seed, purpose, counter)`.
pub fn stream(seed: u64, purpose: Purpose, counter: u64) -> ChaCha8Rng {
    let key = seed ^ (purpose as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(counter);
    rng
}
