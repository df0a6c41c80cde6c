//! Seed derivation and counter-based index streams.
//!
//! Every random quantity in the crate is drawn from a generator whose seed is
//! derived from a root seed plus a domain tag, so that independent streams
//! (training data, replacements, fresh test samples, batch indices) never
//! overlap and every result is reproducible from the root seed alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags separating the sample streams drawn from one distribution.
pub mod stream {
    pub const DATASET: u64 = 0x01;
    pub const REPLACEMENT: u64 = 0x02;
    pub const FRESH: u64 = 0x03;
    pub const TEST: u64 = 0x04;
    pub const HELDOUT: u64 = 0x05;
    pub const PRETRAIN: u64 = 0x06;
    pub const FAMILY: u64 = 0x07;
    pub const PROBE: u64 = 0x08;
    pub const MASK: u64 = 0x09;
    pub const REPLICATE: u64 = 0x0a;
    pub const GROUP: u64 = 0x0b;
}

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a root seed with an ordered list of tags.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(seed), |acc, &t| {
        splitmix64(acc ^ splitmix64(t.wrapping_add(0x5851_f42d_4c95_7f2d)))
    })
}

pub fn rng_for(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}

/// Uniform index in `[0, n)` as a pure function of `(seed, step, slot)`.
///
/// Uses the multiply-shift reduction, so the value does not depend on any
/// generator state and two runs sharing a seed see the same stream.
#[inline]
pub fn stream_index(seed: u64, step: u64, slot: u64, n: usize) -> usize {
    let r =
        splitmix64(splitmix64(seed ^ splitmix64(step)) ^ slot.wrapping_mul(0xd6e8_feb8_6659_fd93));
    ((r as u128 * n as u128) >> 64) as usize
}
