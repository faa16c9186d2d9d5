//! Seeded random streams. Every stochastic routine in the crate takes an
//! explicit seed and draws from ChaCha8 so runs are reproducible across
//! platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type KvnnRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> KvnnRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream from a base seed and a tag.
pub fn derived(seed: u64, tag: u64) -> KvnnRng {
    let mut base = ChaCha8Rng::seed_from_u64(seed);
    base.set_stream(tag);
    base
}

pub fn normal(rng: &mut KvnnRng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vec(rng: &mut KvnnRng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * normal(rng)).collect()
}

pub fn uniform_vec(rng: &mut KvnnRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..=hi)).collect()
}

/// Uniform point on the unit sphere in `R^d`.
pub fn unit_sphere(rng: &mut KvnnRng, d: usize) -> Vec<f64> {
    loop {
        let v = normal_vec(rng, d, 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// A child seed for component `tag` of a seeded construction.
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    use rand::RngCore;
    derived(seed, tag).next_u64()
}
