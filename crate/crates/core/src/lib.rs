//! Sequence-to-set extreme multi-label text classification.
//!
//! A bidirectional GRU encoder with attention and a lightweight convolution
//! branch feeds an autoregressive decoder that emits a fixed number of label
//! distributions. Training is permutation invariant: gold labels are matched
//! to prediction slots with the Hungarian method, and a semantic optimal
//! transport distance (solved with IPOT) regularises every prediction towards
//! the gold labels in label-embedding space.
//!
//! The numerical core is generic over [`Scalar`] (`f32` and `f64`); the type
//! aliases below pin the common instantiations.

// `!(x > 0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod nnmodel;
pub mod pipeline;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod transport;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision model, the default for training and checkpoints.
pub type ModelF32 = nnmodel::Seq2Set<f32>;
/// Double-precision model, used by the gradient checks.
pub type ModelF64 = nnmodel::Seq2Set<f64>;
pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type TransportPlanF64 = transport::TransportPlan<f64>;
pub type IpotParamsF64 = transport::IpotParams<f64>;
