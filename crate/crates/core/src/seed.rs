//! Seed fan-out.
//!
//! One global seed is expanded into independent per-component seeds as
//! `u64::from_le_bytes(SHA-256("fvlm" || base_le || tag || index_le)[..8])`,
//! so e.g. the data seed can be changed without touching model init.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(b"fvlm");
    h.update(base.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
