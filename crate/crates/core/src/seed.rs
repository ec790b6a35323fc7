//! Seed splitting.
//!
//! A run has one root seed. Each component derives its own stream from
//! `SHA-256(root_le_bytes || name)`, truncated to the first 8 bytes, so adding
//! a component never shifts another component's random numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn sub_seed(root: u64, component: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(component.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_for(root: u64, component: &str) -> Rng {
    Rng::seed_from_u64(sub_seed(root, component))
}
