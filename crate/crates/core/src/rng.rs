//! Seeding and sampling helpers shared by every module.
//!
//! All randomness flows through [`Xoshiro256PlusPlus`] seeded with
//! `seed_from_u64` (SplitMix64 expansion). A run-level seed is fanned out to
//! per-module seeds by XOR with the FNV-1a hash of a module tag.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
pub use rand_xoshiro::Xoshiro256PlusPlus as Prng;

use crate::numerics::Tensor;

pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(tag: &str) -> u64 {
    tag.bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Seed for the module identified by `tag`.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    seed ^ fnv1a(tag)
}

pub fn prng(seed: u64, tag: &str) -> Prng {
    Prng::seed_from_u64(derive_seed(seed, tag))
}

/// Normal(0, std²) samples redrawn until they fall within two standard deviations.
pub fn truncated_normal(rng: &mut Prng, shape: &[usize], std: f32) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| loop {
            let z: f32 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape from caller")
}

pub fn uniform(rng: &mut Prng, low: f32, high: f32) -> f32 {
    if high > low {
        rng.random_range(low..high)
    } else {
        low
    }
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation(rng: &mut Prng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
