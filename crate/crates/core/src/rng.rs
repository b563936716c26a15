//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! seeded from a parent seed mixed with a stream tag, so runs are replayable.

use rand::SeedableRng;
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn hash2(a: u64, b: u64) -> u64 {
    mix64(mix64(a) ^ b.rotate_left(29))
}

/// Derive a child seed from a parent seed and a textual stream name.
pub fn derive(seed: u64, stream: &str) -> u64 {
    stream
        .bytes()
        .fold(mix64(seed), |acc, byte| mix64(acc ^ u64::from(byte)))
}

pub fn derive_n(seed: u64, stream: &str, n: u64) -> u64 {
    hash2(derive(seed, stream), n)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, name: &str) -> Rng {
    rng(derive(seed, name))
}

pub fn normal(rng: &mut impl rand::Rng) -> f64 {
    rng.sample(StandardNormal)
}
