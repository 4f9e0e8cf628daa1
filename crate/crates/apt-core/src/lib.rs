//! Adaptive precision training engine.
//!
//! Trains small dense/conv networks whose weights live as k-bit affine
//! codes for both the forward and the backward pass — no full-precision
//! master copy. Between epochs, a per-layer underflow metric (mean
//! gradient magnitude relative to the layer's representable resolution)
//! drives a one-bit-at-a-time precision policy: starving layers gain a
//! bit, over-provisioned layers lose one. Training energy and parameter
//! memory are accounted per iteration as functions of the per-layer
//! bitwidths, normalized against the same model held at 32-bit.

pub mod checkpoint;
pub mod cost;
pub mod csvlog;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod policy;
pub mod quant;
pub mod sweep;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
