// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by a
//! master seed and a small tuple of stream indices, so that work split
//! across cells, steps or trials draws the same numbers regardless of the
//! order it is executed in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand::Rng;
pub use rand_chacha::ChaCha8Rng as StreamRng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a stream index.
pub fn derive(seed: u64, index: u64) -> u64 {
    mix64(mix64(seed) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// A generator for the stream `(seed, indices...)`.
pub fn stream(seed: u64, indices: &[u64]) -> ChaCha8Rng {
    let key = indices.iter().fold(mix64(seed), |acc, &i| derive(acc, i));
    ChaCha8Rng::seed_from_u64(key)
}

/// 64-bit FNV-1a, used to key streams by names.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// A standard normal draw.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand_distr::Distribution;
    rand_distr::StandardNormal.sample(rng)
}

/// Uniform draw in `[lo, hi)`.
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}
