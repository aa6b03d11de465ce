//! Longitudinal image-pair classification with a Siamese Swin encoder and
//! dual cross-attention fusion.

pub mod archive;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod interpret;
pub mod model;
pub mod params;
pub mod stats;
pub mod swin;
pub mod train;
pub mod tensor;

pub use error::Error;
pub type Result<T> = std::result::Result<T, Error>;

/// Deterministic RNG stream derived from a base seed plus a purpose label.
///
/// Hashing the label in keeps independent consumers (fold shuffling, sampler,
/// augmentation, ...) on decorrelated streams while staying reproducible.
pub fn seeded_rng(seed: u64, label: &str) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    rand_chacha::ChaCha8Rng::from_seed(key)
}
