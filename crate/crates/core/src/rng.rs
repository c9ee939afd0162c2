//! Counter-based random streams.
//!
//! Output `i` of a stream is a pure function of `(seed, i)`: the SplitMix64
//! finalizer applied to `seed + (i + 1) * GOLDEN`. Child streams are keyed
//! by hashing a label into the parent seed, so per-item streams can be
//! consumed in any order without affecting each other.

use rand_core::RngCore;

use crate::tensor::Tensor;

pub const ALGORITHM: &str = "splitmix64-counter";

/// Lower/upper clamp for uniform draws feeding the Gumbel double-log.
pub const UNIFORM_EPS: f64 = 1e-12;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RandomStream {
    seed: u64,
    counter: u64,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    /// Resumes a stream at an explicit position.
    pub fn at(seed: u64, counter: u64) -> Self {
        Self { seed, counter }
    }

    pub fn algorithm(&self) -> &'static str {
        ALGORITHM
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Independent child stream keyed by `label`; does not advance `self`.
    pub fn derive(&self, label: &str) -> Self {
        Self::new(mix64(self.seed ^ mix64(fnv1a(label.as_bytes()))))
    }

    /// Independent child stream keyed by an integer (item id, epoch, ...).
    pub fn derive_index(&self, index: u64) -> Self {
        Self::new(mix64(
            self.seed ^ mix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)),
        ))
    }

    pub fn next_u64_raw(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[UNIFORM_EPS, 1 - UNIFORM_EPS]`.
    pub fn uniform(&mut self) -> f64 {
        let u = ((self.next_u64_raw() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
        u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    }

    pub fn gumbel(&mut self) -> f64 {
        gumbel_from_uniform(self.uniform())
    }

    /// Uniform integer in `0..n` (Lemire's multiply-shift; the bias is below 2^-40 for the sizes used here).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64_raw() as u128 * n as u128) >> 64) as usize
    }

    pub fn sample_uniform(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| self.uniform())
    }

    pub fn sample_gumbel(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| self.gumbel())
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

impl RngCore for RandomStream {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64_raw() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.next_u64_raw()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64_raw().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}
