//! Counter-based random streams.
//!
//! Stream `s` under seed `sigma` is a ChaCha8 keystream keyed by `sigma` with
//! stream id `2 s + domain`, so draw `k` of any stream is a pure function of
//! `(sigma, s, k)` and independent of scheduling. Each trajectory owns two
//! domains: one for the jump mechanism and one for Brownian increments.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Identifies one trajectory's randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamId {
    pub seed: u64,
    pub stream: u64,
}

impl StreamId {
    pub fn new(seed: u64, stream: u64) -> Self {
        StreamId { seed, stream }
    }

    fn rng(self, domain: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream.wrapping_mul(2).wrapping_add(domain));
        rng
    }

    /// Candidate times, channel picks and acceptance marks.
    pub fn jump_rng(self) -> ChaCha8Rng {
        self.rng(0)
    }

    /// Brownian increments.
    pub fn diffusion_rng(self) -> ChaCha8Rng {
        self.rng(1)
    }
}

/// Stream descriptors `(seed, 1..=n)`.
pub fn seed_streams(seed: u64, n: u64) -> Vec<StreamId> {
    (1..=n).map(|s| StreamId::new(seed, s)).collect()
}
