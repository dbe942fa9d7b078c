//! Seed derivation for the per-concern random streams.
//!
//! Each randomized subsystem (topology, catalog, mobility, request
//! generation, strategy, zoning) gets its own ChaCha stream derived from the
//! master seed and a label. Changing the strategy therefore never perturbs
//! the demand a run sees, which is what makes strategy comparisons on the
//! same seed meaningful.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Derives an independent, reproducible RNG stream from the master seed.
pub fn stream(master_seed: u64, label: &str) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(seed)
}
