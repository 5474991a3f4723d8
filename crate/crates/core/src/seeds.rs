//! Counter-based seed derivation.
//!
//! Every stream is keyed by `(global seed, stage label, index)`, so adding a
//! client or a stage never shifts the streams of the others.

use sha2::{Digest, Sha256};

pub fn derive_seed(global: u64, stage: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update((stage.len() as u64).to_le_bytes());
    h.update(stage.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Derives from a string key, e.g. a client id.
pub fn derive_seed_str(global: u64, stage: &str, key: &str) -> u64 {
    derive_seed(derive_seed(global, stage, 0), key, key.len() as u64)
}
