//! Seeded RNG construction. Every stochastic draw in the library flows from a
//! generator created here so runs are reproducible from a single seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub fn seeded(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Derives an independent child stream, e.g. one per training phase, so that
/// adding draws in one phase does not shift another phase's sequence.
pub fn derive(parent: &mut ChaCha20Rng) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(parent.gen())
}
