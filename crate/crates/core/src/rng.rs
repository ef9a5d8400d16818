//! Seeded random streams.
//!
//! Every stochastic component draws from ChaCha8 (`rand_chacha::ChaCha8Rng`),
//! seeded with `seed_from_u64` and separated into independent streams with
//! `set_stream`. ChaCha8 is counter-based and its output is fixed by the
//! algorithm, so datasets and training runs reproduce bit for bit across
//! platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named stream identifiers so components never share a random sequence.
pub mod streams {
    pub const PROTOTYPES: u64 = 1;
    pub const SHIFT: u64 = 2;
    pub const SOURCE_NOISE: u64 = 3;
    pub const TARGET_NOISE: u64 = 4;
    pub const INIT: u64 = 10;
    pub const SHUFFLE: u64 = 11;
    pub const CLIPS: u64 = 12;
    pub const CLUSTERING: u64 = 13;
}

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 finalizer. Used to derive sub-seeds and order-independent
/// hash keys.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a label.
pub fn derive(seed: u64, label: u64) -> u64 {
    mix64(seed ^ mix64(label))
}

/// Maps a 64-bit hash onto the open unit interval (0, 1).
pub fn unit_open(h: u64) -> f64 {
    ((h >> 12) as f64 + 0.5) / (1u64 << 52) as f64
}
