//! Reproducible random streams.
//!
//! Every random consumer draws from a ChaCha stream keyed by a 64-bit seed.
//! Child seeds are derived by hashing `(parent, tag)` with SplitMix64, so a
//! replication `r` of an experiment seeded with `s` always sees the same
//! stream no matter how the work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type Stream = ChaCha12Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed of child stream `tag` from `seed`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(tag.wrapping_add(0xA5A5_A5A5_5A5A_5A5A)))
}

/// Derives a seed from a path of tags, e.g. `(replication, step_block)`.
pub fn derive_path(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(seed, |s, &t| derive_seed(s, t))
}

/// Opens the stream for `seed`.
pub fn stream(seed: u64) -> Stream {
    ChaCha12Rng::seed_from_u64(seed)
}
