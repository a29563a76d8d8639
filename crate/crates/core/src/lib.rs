//! Multi-user WiFi CSI sensing: per-slot identity-dependent recognition and
//! identity-agnostic activity counting.
//!
//! The pipeline runs CSI amplitude through [`transform`] into a square image,
//! through a [`model::Model`] (learned 1x1 projection, CNN backbone, task
//! head), and is trained by [`train::fit`] and scored by [`eval`].

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod labels;
pub mod loss;
pub mod model;
pub mod splits;
pub mod train;
pub mod transform;

pub use csicount_nn as nn;
pub use csicount_nn::{Dtype, Scalar};
pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type CsiSample32 = data::CsiSample<f32>;
pub type CsiSample64 = data::CsiSample<f64>;

/// Independent RNG stream for `seed` and a path of stream identifiers.
pub fn derived_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
