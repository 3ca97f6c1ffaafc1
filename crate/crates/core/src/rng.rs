//! Counter-based seeded generators. Every random draw in the crate comes from
//! a ChaCha stream selected by `(seed, stream)`, so draws never depend on the
//! order in which independent items are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream identifier derived from a string key (instance id, token, ...).
pub fn key_stream(key: &str) -> u64 {
    let digest = Sha256::digest(key.as_bytes());
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(word)
}

// Stream namespaces for the different consumers of a single user seed.
pub(crate) const STREAM_INIT: u64 = 0x494e_4954;
pub(crate) const STREAM_WORLD: u64 = 0x574f_524c;
pub(crate) const STREAM_LABELS: u64 = 0x4c41_4245;
pub(crate) const STREAM_SHUFFLE: u64 = 0x5348_5546_0000_0000;
