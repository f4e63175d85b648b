//! Counter-based splittable random stream.
//!
//! The `i`-th 64-bit output of a stream is `mix64(key + i * GOLDEN)` where the
//! key is derived from `(seed, stream_id)`. This is the SplitMix64 state
//! transition evaluated at an explicit counter, so a stream can be rebuilt
//! from its three integers alone. Normals use Box–Muller on the uniform
//! stream, which keeps draws bit-reproducible across platforms.
//!
//! Test vectors (`seed = 42`, `stream_id = 0`), first three `next_u64` values:
//! `9565188130538924981, 8938581102218942105, 3542011296139754788`.

use super::tensor::Tensor;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const STREAM_SALT: u64 = 0x632B_E59B_D9B4_E019;
const CHILD_SALT: u64 = 0xD1B5_4A32_D192_ED03;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    counter: u64,
    stream_id: u64,
    key: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream_id: u64) -> Self {
        let key = mix64(seed.wrapping_add(mix64(stream_id.wrapping_add(STREAM_SALT))));
        Self {
            seed,
            counter: 0,
            stream_id,
            key,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// One Box–Muller pair.
    #[inline]
    pub fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        (r * theta.cos(), r * theta.sin())
    }

    /// A single standard normal (the cosine half of a fresh pair).
    pub fn normal(&mut self) -> f64 {
        self.normal_pair().0
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        let mut chunks = out.chunks_exact_mut(2);
        for pair in &mut chunks {
            let (a, b) = self.normal_pair();
            pair[0] = a;
            pair[1] = b;
        }
        if let [last] = chunks.into_remainder() {
            *last = self.normal();
        }
    }

    /// I.i.d. standard normal matrix.
    pub fn randn(&mut self, rows: usize, cols: usize) -> Tensor {
        let mut data = vec![0.0; rows * cols];
        self.fill_normal(&mut data);
        Tensor::from_parts(vec![rows, cols], data)
    }

    /// Uniformly random permutation of `0..n` (Fisher–Yates).
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }

    /// Child stream whose id is drawn from this stream; advances the parent.
    pub fn split(&mut self) -> RngStream {
        let id = self.next_u64();
        RngStream::with_stream(self.seed, id)
    }

    /// Child stream addressed by `index`; does not advance the parent, so the
    /// `i`-th child is the same no matter how many siblings are used.
    pub fn child(&self, index: u64) -> RngStream {
        let id = mix64(self.stream_id ^ mix64(index.wrapping_add(CHILD_SALT)))
            ^ self.counter.wrapping_mul(GOLDEN);
        RngStream::with_stream(self.seed, id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn golden_u64() {
        let mut s = RngStream::new(42);
        let got: Vec<u64> = (0..3).map(|_| s.next_u64()).collect();
        assert_eq!(got, GOLDEN_U64);
    }

    #[test]
    fn golden_normal() {
        let mut s = RngStream::new(42);
        let first = s.randn(1, 2);
        assert_eq!(first.data()[0].to_bits(), GOLDEN_NORMAL_BITS[0]);
        assert_eq!(first.data()[1].to_bits(), GOLDEN_NORMAL_BITS[1]);
    }

    // Recorded from the first run of this implementation.
    const GOLDEN_U64: [u64; 3] = [9565188130538924981, 8938581102218942105, 3542011296139754788];
    const GOLDEN_NORMAL_BITS: [u64; 2] = [13831470372859042063, 4593102275337280982];

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngStream::with_stream(7, 3);
        let mut b = RngStream::with_stream(7, 3);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn normal_mean_is_near_zero() {
        let mut s = RngStream::new(1);
        let mut buf = vec![0.0; 1_000_000];
        s.fill_normal(&mut buf);
        let mean = buf.iter().sum::<f64>() / buf.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        let var = buf.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / buf.len() as f64;
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn split_streams_do_not_overlap() {
        let mut parent = RngStream::new(99);
        let mut a = parent.split();
        let mut b = parent.split();
        let mut seen = HashSet::new();
        for _ in 0..10_000 {
            seen.insert(parent.next_u64());
        }
        for _ in 0..10_000 {
            assert!(seen.insert(a.next_u64()));
        }
        for _ in 0..10_000 {
            assert!(seen.insert(b.next_u64()));
        }
    }

    #[test]
    fn children_are_stable_and_distinct() {
        let s = RngStream::new(5);
        assert_eq!(s.child(3), s.child(3));
        assert_ne!(s.child(3).stream_id(), s.child(4).stream_id());
    }

    #[test]
    fn permutation_is_bijection() {
        let mut s = RngStream::new(11);
        let mut p = s.permutation(50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }
}
