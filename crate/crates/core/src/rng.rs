//! Counter-based, splittable 64-bit random streams.
//!
//! Every output is a keyed hash of a running counter, so a stream is fully
//! described by its two key words and its position. `fork` derives a child
//! stream from a parent key and an index without touching the parent's
//! counter, which is how replications and bootstrap resamples get their own
//! streams: the result depends only on `(seed, path of fork indices)` and
//! never on scheduling.

use rand_core::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::special::ln_factorial;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;
const FORK_A: u64 = 0xd1b5_4a32_d192_ed03;
const FORK_B: u64 = 0x8cb9_2ba7_2f3d_8dd7;

#[inline]
fn fmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Means below this are sampled by sequential inversion.
pub const POISSON_INVERSION_LIMIT: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamRng {
    key0: u64,
    key1: u64,
    counter: u64,
}

impl StreamRng {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            key0: fmix64(seed ^ FORK_A),
            key1: fmix64(seed.wrapping_add(GOLDEN) ^ FORK_B),
            counter: 0,
        }
    }

    /// Child stream number `index`. Independent of how far `self` has advanced.
    pub fn fork(&self, index: u64) -> Self {
        let tag = fmix64(index.wrapping_mul(GOLDEN) ^ FORK_A);
        Self {
            key0: fmix64(self.key0 ^ tag),
            key1: fmix64(self.key1.wrapping_add(tag) ^ FORK_B),
            counter: 0,
        }
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (Lemire's multiply-shift with rejection).
    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        let mut m = (self.next_u64() as u128) * (n as u128);
        let mut low = m as u64;
        if low < n {
            let threshold = n.wrapping_neg() % n;
            while low < threshold {
                m = (self.next_u64() as u128) * (n as u128);
                low = m as u64;
            }
        }
        (m >> 64) as u64
    }

    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(self)
    }

    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.standard_normal()
    }

    /// Poisson draw. Inversion for small means, PTRS transformed rejection
    /// (Hörmann 1993) otherwise.
    pub fn poisson(&mut self, mean: f64) -> u64 {
        if mean <= 0.0 {
            return 0;
        }
        if mean < POISSON_INVERSION_LIMIT {
            self.poisson_inversion(mean)
        } else {
            self.poisson_ptrs(mean)
        }
    }

    fn poisson_inversion(&mut self, mean: f64) -> u64 {
        let u = self.uniform();
        let mut k = 0u64;
        let mut p = (-mean).exp();
        let mut cdf = p;
        while u > cdf {
            k += 1;
            p *= mean / k as f64;
            cdf += p;
            // cdf can stall just below 1 from rounding.
            if p <= 0.0 {
                break;
            }
        }
        k
    }

    fn poisson_ptrs(&mut self, mean: f64) -> u64 {
        let smu = mean.sqrt();
        let b = 0.931 + 2.53 * smu;
        let a = -0.059 + 0.02483 * b;
        let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
        let vr = 0.9277 - 3.6224 / (b - 2.0);
        let log_mean = mean.ln();
        loop {
            let u = self.uniform() - 0.5;
            let v = self.uniform();
            let us = 0.5 - u.abs();
            let k = ((2.0 * a / us + b) * u + mean + 0.43).floor();
            if us >= 0.07 && v <= vr {
                return k as u64;
            }
            if k < 0.0 || (us < 0.013 && v > us) {
                continue;
            }
            let lhs = v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln();
            let rhs = -mean + k * log_mean - ln_factorial(k as u64);
            if lhs <= rhs {
                return k as u64;
            }
        }
    }
}

impl RngCore for StreamRng {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter = self.counter.wrapping_add(1);
        fmix64(fmix64(c.wrapping_mul(GOLDEN) ^ self.key0).wrapping_add(self.key1))
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}
