//! Shared inputs for the benchmark suite.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use switchdiff::{fixtures, Model};

/// A fixed random model with `l` fast states in dimension `d`.
pub fn random_model(l: usize, d: usize) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(0xbe7c4 + l as u64);
    fixtures::random_affine_model(&mut rng, l, d, d)
}

pub fn reference() -> Model {
    fixtures::reference_two_state()
}
