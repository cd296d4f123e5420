//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha8 stream derived
//! from a single 64-bit seed, so adding draws in one place (say, an extra
//! dropout layer) never shifts the sequence seen by another (say, the
//! data shuffle). ChaCha8 output is defined bit-for-bit, independent of
//! platform and endianness.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Named consumers of randomness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Init,
    Dropout,
    Shuffle,
    Synthesis,
    /// Free-form streams for tests and verification tooling.
    Custom(u64),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Dropout => 2,
            Stream::Shuffle => 3,
            Stream::Synthesis => 4,
            Stream::Custom(n) => 0x1000 + n,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: Stream,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream.id());
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> Stream {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f32 {
        self.inner.random()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f32 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_stream_repeat() {
        let mut a = Rng::new(7, Stream::Dropout);
        let mut b = Rng::new(7, Stream::Dropout);
        let xs: Vec<u64> = (0..32).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..32).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn streams_are_independent() {
        let mut a = Rng::new(7, Stream::Init);
        let mut b = Rng::new(7, Stream::Shuffle);
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn known_first_draw_is_stable() {
        // Pinned so an accidental change of generator or stream layout is caught.
        let mut r = Rng::new(0, Stream::Init);
        let first = r.next_u64();
        let mut again = Rng::new(0, Stream::Init);
        assert_eq!(first, again.next_u64());
        assert_ne!(first, Rng::new(1, Stream::Init).next_u64());
        assert_eq!(first, 13_937_087_304_575_520_531);
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut r = Rng::new(3, Stream::Shuffle);
        let mut v: Vec<usize> = (0..50).collect();
        r.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = Rng::new(11, Stream::Custom(0));
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }
}
