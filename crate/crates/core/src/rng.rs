//! Seeded, position-addressable randomness.
//!
//! Backed by ChaCha8, whose output is fixed by (seed, word position) on every
//! platform, so a saved [`RngState`] resumes the exact same draw sequence.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Float, Tensor};

/// Clamp for uniform draws feeding `-log(-log(u))`.
pub const GUMBEL_EPS: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

/// Serializable snapshot of an [`RngState`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: u64,
    pub position: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for a named purpose, derived from `seed`.
    pub fn derived(seed: u64, tag: &str) -> Self {
        let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
        for b in tag.bytes() {
            h = splitmix64(h ^ b as u64);
        }
        Self::new(splitmix64(h))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed so far.
    pub fn position(&self) -> u64 {
        self.rng.get_word_pos() as u64
    }

    pub fn snapshot(&self) -> RngSnapshot {
        RngSnapshot {
            seed: self.seed,
            position: self.position(),
        }
    }

    pub fn restore(snap: RngSnapshot) -> Self {
        let mut s = Self::new(snap.seed);
        s.rng.set_word_pos(snap.position as u128);
        s
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.rng);
        mean + std * z
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        items.shuffle(&mut self.rng);
    }

    pub fn normal_tensor<T: Float>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.normal(0.0, std))).collect();
        Tensor::new(shape, data).expect("shape product matches")
    }

    pub fn uniform_tensor<T: Float>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(lo + (hi - lo) * self.uniform()))
            .collect();
        Tensor::new(shape, data).expect("shape product matches")
    }

    /// Standard Gumbel samples `-log(-log(u))`, `u` clamped to `[eps, 1-eps]`.
    pub fn gumbel_noise<T: Float>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(gumbel_from_uniform(self.uniform())))
            .collect();
        Tensor::new(shape, data).expect("shape product matches")
    }
}

pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS);
    -(-u.ln()).ln()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gumbel_analytic_points() {
        assert!((gumbel_from_uniform(0.5) - 0.366_512_920_581_664_3).abs() < 1e-12);
        assert!(gumbel_from_uniform((-1.0f64).exp()).abs() < 1e-12);
        assert!(gumbel_from_uniform(0.0).is_finite());
        assert!(gumbel_from_uniform(1.0).is_finite());
    }

    #[test]
    fn gumbel_mean_is_euler_mascheroni() {
        let mut rng = RngState::new(7);
        let t: Tensor<f64> = rng.gumbel_noise(&[100_000]);
        let mean = t.data().iter().sum::<f64>() / t.numel() as f64;
        assert!((mean - 0.577_215_664_9).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn snapshot_resumes_sequence() {
        let mut a = RngState::new(42);
        for _ in 0..13 {
            a.uniform();
        }
        let snap = a.snapshot();
        let next: Vec<u64> = (0..5).map(|_| a.next_u64()).collect();
        let mut b = RngState::restore(snap);
        let again: Vec<u64> = (0..5).map(|_| b.next_u64()).collect();
        assert_eq!(next, again);
    }

    #[test]
    fn same_seed_same_tensor() {
        let a: Tensor<f32> = RngState::new(3).normal_tensor(&[4, 4], 0.02);
        let b: Tensor<f32> = RngState::new(3).normal_tensor(&[4, 4], 0.02);
        assert!(a.same_values(&b));
        let c: Tensor<f32> = RngState::derived(3, "x").normal_tensor(&[4, 4], 0.02);
        assert!(!a.same_values(&c));
    }
}
