//! Deterministic random-number streams.
//!
//! Everything stochastic in the crate draws from ChaCha8, a counter-based
//! generator whose 64-bit stream id gives cheap splitting: a single run seed
//! plus a `(domain, index)` pair yields an independent stream, so example
//! `i` of a shard always sees the same draws regardless of how many other
//! examples were generated before it.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Draw domains keep unrelated consumers of the same run seed independent.
pub mod domain {
    /// Parameter initialization.
    pub const INIT: u64 = 1;
    /// Per-example masking and alignment-pair sampling.
    pub const MASKING: u64 = 2;
    /// Batch-order shuffling and dropout during training.
    pub const TRAIN: u64 = 3;
    /// Fresh task heads when fine-tuning re-heads a checkpoint.
    pub const FINETUNE: u64 = 4;
    /// Synthetic corpus generation.
    pub const SYNTH: u64 = 5;
    /// Randomized suites inside tests.
    pub const TEST: u64 = 6;
}

/// Returns the generator for `(seed, domain, index)`.
///
/// The domain perturbs the 256-bit key, the index selects the ChaCha stream;
/// streams with different indices never overlap.
pub fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}
