//! Counter-based seeding.
//!
//! Every random stream is keyed by `(tag, master seed, counters…)` through
//! SHA-256, so a stream's content never depends on which worker draws it or
//! in which order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Build the generator for one stream.
pub fn stream(master: u64, tag: &str, counters: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    h.update(master.to_le_bytes());
    for c in counters {
        h.update(c.to_le_bytes());
    }
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Derive a child master seed, e.g. one per `R` of a ladder.
pub fn derive_seed(master: u64, tag: &str, counters: &[u64]) -> u64 {
    use rand::RngCore;
    stream(master, tag, counters).next_u64()
}
