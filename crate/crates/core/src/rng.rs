//! Seed derivation and random streams.
//!
//! Every stochastic component draws from a ChaCha stream keyed by a 64-bit
//! seed. Child seeds come from [`derive`], which pushes `(seed, stream)`
//! through the SplitMix64 finalizer. For a fixed parent the map
//! `stream -> child` is a bijection, so sibling streams never collide.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
pub fn avalanche(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for stream `stream` of `seed`.
pub fn derive(seed: u64, stream: u64) -> u64 {
    avalanche(seed.wrapping_add(GOLDEN.wrapping_mul(stream.wrapping_add(1))))
}

/// Child seed for a named role, e.g. `derive_named(run_seed, "corpus")`.
pub fn derive_named(seed: u64, role: &str) -> u64 {
    // FNV-1a over the label, then the usual mix.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in role.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    derive(seed, h)
}

pub fn stream(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
