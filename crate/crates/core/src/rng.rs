//! Named random streams split from a single root seed.
//!
//! Every consumer of randomness (partitioning, initialization, generation,
//! batch pairing, ...) asks for its own stream by name, so changing how many
//! numbers one component draws never shifts another component's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives a 64-bit seed from a root seed and a stream label.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(root: u64, label: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(root, label))
}

/// Root seed plus a stable set of named sub-streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    root: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn seed(&self, label: &str) -> u64 {
        derive_seed(self.root, label)
    }

    pub fn rng(&self, label: &str) -> Rng {
        stream(self.root, label)
    }

    pub fn child(&self, label: &str) -> SeedTree {
        SeedTree::new(self.seed(label))
    }
}
