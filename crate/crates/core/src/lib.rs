//! Body and hand dual-stream skeleton action recognition.
//!
//! Graph-convolution feature streams, logit ensembling losses, exact and
//! random-feature cross-attention, axis pooling attention, the four-branch
//! expertized model, a synthetic data harness, and an analytic cost model.

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod exec;
pub mod graph;
pub mod harness;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
