//! Seeded random number generation.
//!
//! All randomness in the crate flows through [`Rng`], a thin wrapper over
//! ChaCha8 (counter-based, platform independent). Sub-streams are derived
//! with [`mix_seed`], a SplitMix64 fold over the parts, so that any
//! component can get its own reproducible stream from `(run_seed, tag, ...)`
//! without sharing mutable state.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a list of integers into a 64-bit seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Stable 64-bit tag for a string label, used as a [`mix_seed`] part.
pub fn tag(label: &str) -> u64 {
    label.bytes().fold(0xCBF2_9CE4_8422_2325_u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01B3)
    })
}

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream keyed by `(seed, parts...)`.
    pub fn derived(seed: u64, parts: &[u64]) -> Self {
        let mut all = Vec::with_capacity(parts.len() + 1);
        all.push(seed);
        all.extend_from_slice(parts);
        Self::new(mix_seed(&all))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `[0, n)`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `count` distinct indices from `0..n`, in sampled order.
    pub fn sample_indices(&mut self, n: usize, count: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, count).into_vec()
    }

    /// Index drawn proportionally to non-negative `weights`.
    pub fn weighted(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut r = self.uniform() * total;
        for (i, w) in weights.iter().enumerate() {
            if r < *w {
                return i;
            }
            r -= w;
        }
        weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }
}
