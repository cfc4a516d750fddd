//! Approximate-DRAM error modeling and DNN error-tolerance tooling.

pub mod characterize;
pub mod device;
pub mod dram;
pub mod error;
pub mod fit;
pub mod mapping;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Network32 = nn::Network<f32>;
pub type Network64 = nn::Network<f64>;

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
