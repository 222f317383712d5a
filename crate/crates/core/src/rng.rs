//! Seeded, stream-splittable randomness.
//!
//! Reproducibility contract: every stochastic component (initialization, epoch
//! shuffling, negative sampling, each grid-search cell) draws from its own
//! *stream* of a ChaCha8 generator, derived from the experiment seed and a
//! small stream id.  Streams are independent of each other and of how much any
//! other stream has been consumed, so adding draws in one component never
//! perturbs another.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A deterministic random generator addressed by `(seed, stream)`.
///
/// Thin wrapper over [`ChaCha8Rng`]; implements [`RngCore`] so it plugs into
/// the `rand` ecosystem (distributions, shuffles, index sampling).
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    /// Generator for stream 0 of `seed`.
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Generator for an explicit `(seed, stream)` pair.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    /// A fresh generator on stream `stream` of the same seed, starting at the
    /// beginning of that stream regardless of this generator's position.
    pub fn derive(&self, stream: u64) -> Self {
        Self::with_stream(self.seed, stream)
    }

    /// Seed this generator was built from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Stream id this generator draws from.
    pub fn stream(&self) -> u64 {
        self.stream
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
}
