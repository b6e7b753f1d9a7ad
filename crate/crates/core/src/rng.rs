//! Deterministic stream splitting from one global seed.
//!
//! Every random draw in a run comes from a named stream derived as
//! `SHA-256(seed || domain || index)`, so components never share or
//! perturb each other's randomness. Paired runs (ablation arms with the
//! same seed) therefore see identical noise wherever they request the
//! same stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// An independent RNG stream for `(seed, domain, index)`.
pub fn stream(seed: u64, domain: &str, index: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(domain.as_bytes());
    hasher.update([0u8]);
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
