//! Deterministic seed derivation and tensor sampling.
//!
//! All stochastic draws in the pipeline derive from a base seed plus a list
//! of stream components (sequence index, frame index, epoch, ...), so results
//! are reproducible regardless of iteration or thread order.

use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// splitmix64-style avalanche mix of a base seed and stream components.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut s = base ^ 0x9e3779b97f4a7c15;
    for &p in parts {
        s ^= p.wrapping_add(0x9e3779b97f4a7c15);
        s ^= s >> 30;
        s = s.wrapping_mul(0xbf58476d1ce4e5b9);
        s ^= s >> 27;
        s = s.wrapping_mul(0x94d049bb133111eb);
        s ^= s >> 31;
    }
    s
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    Tensor::new(shape, data).expect("shape/data length agree by construction")
}

pub fn standard_normal(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    randn(shape, 1.0, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        let a = derive_seed(7, &[1, 2]);
        let b = derive_seed(7, &[1, 2]);
        let c = derive_seed(7, &[2, 1]);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn same_seed_same_draws() {
        let mut r1 = rng_from(42);
        let mut r2 = rng_from(42);
        let t1 = randn(vec![3, 4], 1.0, &mut r1);
        let t2 = randn(vec![3, 4], 1.0, &mut r2);
        assert_eq!(t1, t2);
    }
}
