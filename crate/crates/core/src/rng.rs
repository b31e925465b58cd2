//! Portable seeded randomness.
//!
//! All randomness comes from SplitMix64 streams. A stream's initial state is
//! derived from a run seed and a purpose tag as the first eight bytes
//! (little-endian) of `SHA-256(seed.to_le_bytes() || tag)`, so independent
//! consumers (the pair shuffle, batch sampling, evaluation sets) never share
//! a sequence. Bounded integers use rejection sampling on the raw 64-bit
//! output; floats use the top 53 bits. Both rules are simple enough to port.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use sha2::{Digest, Sha256};

pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Debug)]
pub struct Stream(SplitMix64);

impl Stream {
    /// A stream whose SplitMix64 state starts at `state`.
    pub fn from_state(state: u64) -> Self {
        Self(SplitMix64::from_seed(state.to_le_bytes()))
    }

    pub fn derived(seed: u64, tag: &str) -> Self {
        Self::from_state(derive_seed(seed, tag))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn inclusive(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo <= hi, "empty range {lo}..={hi}");
        lo + self.below((hi - lo + 1) as u64) as usize
    }

    /// Uniform float in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Index drawn with probability proportional to `weights`.
    pub fn weighted(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut x = self.unit() * total;
        for (i, &w) in weights.iter().enumerate() {
            if x < w {
                return i;
            }
            x -= w;
        }
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    /// Fisher-Yates, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Normal(0, std) via Box-Muller.
    pub fn normal(&mut self, std: f64) -> f64 {
        let u1 = 1.0 - self.unit();
        let u2 = self.unit();
        std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
