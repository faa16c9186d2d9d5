//! Kernelized Volterra filters.
//!
//! Truncated Volterra mappings are represented as sums of polynomial-kernel
//! atoms `gamma * (x . w)^r` with learnable centers `w`, grouped into one
//! branch per interaction order. The crate provides the dense reference
//! mapping, polynomial kernels and feature maps, the atomic representation
//! with exact fitting, convolutional layers built from it with analytic
//! gradients, training utilities, and a desk-scale experiment harness.

pub mod data;
pub mod error;
pub mod experiment;
pub mod kernels;
pub mod layer;
pub mod mkv;
pub mod network;
pub mod parallel;
pub mod rng;
pub mod selfcheck;
pub mod tensor;
pub mod training;
pub mod volterra;

pub use error::{KvnnError, Result};
pub use tensor::{MultiIndex, Tensor};

/// Version string recorded in experiment manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
