//! Seeded random streams.
//!
//! All randomness flows from explicit `u64` seeds. Independent streams are
//! derived by hashing a base seed with a path of tags, so adding a new
//! consumer never shifts the numbers another consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `base` and a tag path.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_from(base: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, tags))
}

/// Fills a vector with standard normal draws.
pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Stream tags, kept in one place so call sites cannot collide.
pub mod tag {
    pub const DATASET: u64 = 1;
    pub const INIT: u64 = 2;
    pub const ANCHORS: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const GROUP: u64 = 5;
    pub const TIMESTEPS: u64 = 6;
    pub const NOISE: u64 = 7;
    pub const SAMPLER: u64 = 8;
    pub const PROBE: u64 = 9;
    pub const SPLIT: u64 = 10;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn derived_streams_are_stable_and_distinct() {
        let a = derive_seed(7, &[1, 2]);
        assert_eq!(a, derive_seed(7, &[1, 2]));
        assert_ne!(a, derive_seed(7, &[2, 1]));
        assert_ne!(a, derive_seed(8, &[1, 2]));
        let mut r1 = rng_from(3, &[4]);
        let mut r2 = rng_from(3, &[4]);
        assert_eq!(r1.random::<u64>(), r2.random::<u64>());
    }
}
