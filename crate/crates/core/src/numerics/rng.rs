//! Seeded Gaussian generation.
//!
//! The stream is fully specified so it can be replicated outside Rust:
//!
//! * core generator: ChaCha8 seeded through `SeedableRng::seed_from_u64`
//!   (PCG32 expansion of the 64-bit seed into the 256-bit ChaCha key);
//! * uniforms: the top 53 bits of `next_u64`, scaled by 2⁻⁵³, giving `[0, 1)`;
//! * normals: the basic Box–Muller transform on a pair `(u1, u2)` with
//!   `u1 ← 1 − u1` so the logarithm argument lies in `(0, 1]`. The cosine
//!   branch is returned first and the sine branch is cached for the next call.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::matrix::Matrix;

/// Multiplier used to derive per-replication seeds.
pub const SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

/// Replication seed: `base XOR (index × SEED_MIX)` with wrapping multiplication.
pub fn mix_seed(base: u64, index: u64) -> u64 {
    base ^ index.wrapping_mul(SEED_MIX)
}

#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn standard_normal_vector(&mut self, d: usize) -> Vec<f64> {
        (0..d).map(|_| self.standard_normal()).collect()
    }
}

/// `d` i.i.d. standard normals from a fresh stream seeded with `seed`.
pub fn standard_normal_vector(seed: u64, d: usize) -> Vec<f64> {
    RngState::new(seed).standard_normal_vector(d)
}

/// Draws from `N(0, L·Lᵀ)` given the lower Cholesky factor `L`.
pub fn correlated_normal(rng: &mut RngState, chol: &Matrix) -> Vec<f64> {
    let e = rng.standard_normal_vector(chol.cols());
    (0..chol.rows())
        .map(|i| chol.row(i)[..=i].iter().zip(&e).map(|(l, z)| l * z).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        assert_eq!(standard_normal_vector(1, 3), standard_normal_vector(1, 3));
        assert_ne!(standard_normal_vector(1, 3), standard_normal_vector(2, 3));
    }

    #[test]
    fn large_sample_moments() {
        let mut rng = RngState::new(20240611);
        let n = 1_000_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z = rng.standard_normal();
            s1 += z;
            s2 += z * z;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn uniform_range() {
        let mut rng = RngState::new(0);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn mixed_seeds_are_distinct() {
        let seeds: Vec<u64> = (0..100).map(|r| mix_seed(42, r)).collect();
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), seeds.len());
        assert_eq!(mix_seed(42, 0), 42);
    }
}
