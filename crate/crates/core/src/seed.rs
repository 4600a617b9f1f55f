//! Seed derivation. Every randomized stage gets its generator from a
//! `(global seed, stage name)` pair so no stage touches ambient entropy.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// The generator used everywhere in the crate.
pub type StageRng = ChaCha12Rng;

/// Derives a 64-bit seed from a parent seed and a label.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(parent.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Derives a seed from a parent seed and an integer index.
pub fn derive_indexed(parent: u64, label: &str, index: u64) -> u64 {
    derive_seed(derive_seed(parent, label), &index.to_string())
}

pub fn rng_from(seed: u64) -> StageRng {
    StageRng::seed_from_u64(seed)
}

pub fn stage_rng(parent: u64, label: &str) -> StageRng {
    rng_from(derive_seed(parent, label))
}
