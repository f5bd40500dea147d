//! Seeded, named random substreams.
//!
//! Every stage draws its randomness from a single user-visible seed expanded
//! into independent named streams ("generate", "inject", "corrupt", ...).
//! Reusing the same seed for two different purposes would couple stages that
//! must stay independent (e.g. ablation cells reusing a shared baseline), so
//! stream derivation goes through a hash of `(seed, name)`.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Deterministic RNG used throughout the crate.
pub type Stream = ChaCha12Rng;

/// Derives an independent random stream from a base seed and a stream name.
///
/// The same `(seed, name)` pair always yields the same stream, on every
/// platform.
pub fn substream(seed: u64, name: &str) -> Stream {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(key)
}
