//! Named, seeded random streams. Every consumer derives its own stream from
//! the run seed so that, e.g., changing the noise draws never shifts the
//! random-edge draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Noise = 2,
    Mask = 3,
    RandomEdges = 4,
    GlobalNodes = 5,
    Sampling = 6,
    Data = 7,
}

/// Generator for `stream` at position `index` (e.g. the training step).
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(index)));
    rng.set_stream(stream as u64);
    rng
}

/// Derives a 64-bit seed for `stream` at `index`.
pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix(splitmix(seed).wrapping_add(stream as u64) ^ splitmix(index.wrapping_add(0x5bd1)))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
