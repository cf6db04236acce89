//! Correlated filter pruning for small convolutional networks.
//!
//! The crate trains a LeNet-style CNN, ranks filter pairs of each conv layer
//! by the Pearson correlation of their weights, pushes the selected pairs
//! toward perfect correlation with an `exp(-sum rho)` penalty, removes one
//! filter of every pair with exact structural surgery and finetunes, gated by
//! an accuracy tolerance with rollback.

pub mod corr;
pub mod cost;
pub mod data;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod regularizer;
pub mod rng;
pub mod surgery;
pub mod tensor;
pub mod train;

pub use error::{CfpError, Result};
pub use nn::Network;
pub use tensor::Tensor;
