//! Seed derivation for independent random streams.
//!
//! Every random draw in an evaluation comes from a stream keyed by
//! `(global seed, example id, purpose tag, draw index)`, so results do not
//! depend on the order in which examples are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Random stream type used throughout the engine.
pub type Stream = ChaCha8Rng;

/// Purpose tags separating the streams used for one example.
pub mod tag {
    pub const RATIONALE: &str = "rationale";
    pub const RANDOM_ATTRIBUTION: &str = "random-attribution";
    pub const POOL: &str = "pool";
    pub const BOOTSTRAP: &str = "bootstrap";
    pub const TRAIN: &str = "train";
    pub const SYNTH: &str = "synth";
}

/// Hashes the key into a 64-bit seed.
pub fn derive_seed(global: u64, example_id: &str, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    // Length prefixes keep ("ab","c") and ("a","bc") apart.
    h.update((example_id.len() as u64).to_le_bytes());
    h.update(example_id.as_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let out = h.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&out[..8]);
    u64::from_le_bytes(word)
}

/// Opens the stream for a key.
pub fn stream(global: u64, example_id: &str, tag: &str, index: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(global, example_id, tag, index))
}
