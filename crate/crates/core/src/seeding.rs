//! Seed derivation. Every random stream in the pipeline is a ChaCha8 stream
//! whose seed is derived from a command-level seed and a stage label, so any
//! stage can be replayed on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Hashes `(seed, stage)` into a fresh 64-bit seed.
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Random stream for a named stage.
pub fn stage_rng(seed: u64, stage: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, stage))
}

/// Random stream for the `index`-th item of a stage (a step, a batch, ...).
pub fn indexed_rng(seed: u64, stage: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, stage) ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Per-sentence stream used by corpus augmentation: `corpus_seed XOR line_index`.
pub fn line_rng(corpus_seed: u64, line_index: u64) -> Rng {
    Rng::seed_from_u64(corpus_seed ^ line_index)
}
