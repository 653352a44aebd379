//! Independent random streams keyed by label.
//!
//! Each stream is a ChaCha generator seeded from sha256(seed ‖ label), so a
//! stream depends only on its own label and the run seed. Adding a consumer
//! never shifts another consumer's draws.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

pub type SimRng = ChaCha12Rng;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RngError {
    #[error("rng stream label {0:?} already taken")]
    DuplicateLabel(String),
}

pub fn rng_stream(seed: u64, label: &str) -> SimRng {
    let mut h = Sha256::new();
    h.update(b"viralsim/rng/");
    h.update(seed.to_be_bytes());
    h.update(label.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha12Rng::from_seed(digest)
}

/// Hands out each label at most once per run.
#[derive(Debug, Clone)]
pub struct RngStreams {
    seed: u64,
    taken: BTreeSet<String>,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed, taken: BTreeSet::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&mut self, label: &str) -> Result<SimRng, RngError> {
        if !self.taken.insert(label.to_string()) {
            return Err(RngError::DuplicateLabel(label.to_string()));
        }
        Ok(rng_stream(self.seed, label))
    }
}
