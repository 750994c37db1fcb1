//! Seeded counter-based random streams.
//!
//! Every stochastic step draws from its own ChaCha stream derived from the
//! run seed, so adding a consumer in one place never shifts the draws seen
//! by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Split,
    Shuffle,
    Dropout,
    /// Free-form stream for tests and tools.
    Custom(u64),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Split => 2,
            Stream::Shuffle => 3,
            Stream::Dropout => 4,
            Stream::Custom(k) => 0x1000 + k,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

/// Stream keyed by an extra integer, e.g. the epoch for per-epoch shuffles.
pub fn substream(seed: u64, which: Stream, key: u64) -> StreamRng {
    stream(mix(seed, key), which)
}

/// Stream keyed by a name, so that a named tensor gets the same draws no
/// matter which other tensors exist.
pub fn named_stream(seed: u64, which: Stream, name: &str) -> StreamRng {
    substream(seed, which, fnv1a(name.as_bytes()))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
