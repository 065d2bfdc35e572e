//! Counter-based random streams.
//!
//! A run is identified by a single 64-bit seed. Every consumer derives its own
//! substream from `(seed, purpose tag, index)`, so the numbers a component sees
//! never depend on how many draws other components made before it, nor on
//! thread scheduling.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;

/// Seeded random stream used throughout the crate.
#[derive(Clone, Debug)]
pub struct ScfmRng {
    inner: ChaCha8Rng,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

impl ScfmRng {
    /// Plain stream from a seed (equivalent to the substream `("root", 0)`).
    pub fn new(seed: u64) -> Self {
        Self::substream(seed, "root", 0)
    }

    /// Independent stream for `(seed, tag, index)`.
    pub fn substream(seed: u64, tag: &str, index: u64) -> Self {
        let mut key = [0u8; 32];
        let words = [
            splitmix64(seed),
            splitmix64(seed ^ fnv1a(tag)),
            splitmix64(fnv1a(tag).rotate_left(17) ^ 0xA5A5_A5A5_A5A5_A5A5),
            splitmix64(seed.rotate_left(31) ^ 0x5851_F42D_4C95_7F2D),
        ];
        for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(index);
        Self { inner }
    }

    /// Child stream derived from the current state and a tag; advances `self` by one draw.
    pub fn fork(&mut self, tag: &str) -> Self {
        let s = self.inner.next_u64();
        Self::substream(s, tag, 0)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Tensor of i.i.d. standard normal entries.
    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), self.normal_vec(n)).expect("shape matches data")
    }

    /// Index drawn from unnormalized non-negative weights.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let total: f64 = probs.iter().sum();
        let u = self.uniform() * total;
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
