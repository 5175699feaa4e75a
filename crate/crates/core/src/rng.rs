//! Seeded random streams.
//!
//! Every stochastic routine takes an explicit [`StdRng`]-compatible stream.
//! Independent streams (one per sample, per trajectory, per restart) are
//! derived from a root seed with [`split`], so results never depend on the
//! order in which parallel work completes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives the seed of sub-stream `index` under `root` (splitmix64 finaliser).
pub fn split(root: u64, index: u64) -> u64 {
    let mut z = root
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(root: u64, index: u64) -> Rng {
    seeded(split(root, index))
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}
