//! Seeded, splittable random stream.
//!
//! Every stream is a ChaCha8 generator keyed by a 64-bit seed. Child streams
//! are derived by hashing the parent seed with a label, so the stream handed to
//! one subsystem never depends on how much randomness another one consumed.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Clone for Rng {
    fn clone(&self) -> Self {
        Rng { seed: self.seed, inner: self.inner.clone() }
    }
}

impl std::fmt::Debug for Rng {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Rng").field("seed", &self.seed).finish()
    }
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream for `label`. Does not advance `self`.
    pub fn split(&self, label: &str) -> Rng {
        let mut h = mix64(self.seed);
        for b in label.bytes() {
            h = mix64(h ^ u64::from(b));
        }
        Rng::new(h)
    }

    /// Child stream for an indexed item (batch number, probe number, ...).
    pub fn split_index(&self, label: &str, index: u64) -> Rng {
        let child = self.split(label);
        Rng::new(mix64(child.seed ^ mix64(index)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn uniform_tensor<T: Scalar>(&mut self, shape: Shape, lo: f64, hi: f64) -> Tensor<T> {
        let data = (0..shape.numel()).map(|_| T::lit(self.uniform_range(lo, hi))).collect();
        Tensor::from_vec(shape, data).expect("length matches shape")
    }

    pub fn normal_tensor<T: Scalar>(&mut self, shape: Shape, std: f64) -> Tensor<T> {
        let data = (0..shape.numel()).map(|_| T::lit(std * self.normal())).collect();
        Tensor::from_vec(shape, data).expect("length matches shape")
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }
}
