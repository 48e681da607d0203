//! Counter-based random substreams.
//!
//! Every random draw in the engine comes from a ChaCha8 stream whose key is
//! derived from the run seed plus a path of labels and indices, so adding
//! entities or reordering work never perturbs unrelated draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Root of a tree of named random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamRoot {
    seed: u64,
}

impl StreamRoot {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for `(label, path...)`.
    pub fn stream(&self, label: &str, path: &[u64]) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
        for p in path {
            hasher.update(p.to_le_bytes());
        }
        let digest: [u8; 32] = hasher.finalize().into();
        ChaCha8Rng::from_seed(digest)
    }
}
