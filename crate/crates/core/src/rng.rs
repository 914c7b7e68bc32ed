//! Named, seeded random streams.
//!
//! Every consumer of randomness draws from `substream(root_seed, name,
//! index)`, so components (data, init, shuffle, tsne, permutation, ...) can
//! be re-seeded independently and per-item streams are stable no matter how
//! work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    h.update([0u8]);
    h.update(index.to_le_bytes());
    let key: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(key)
}
