//! Minimal deterministic CNN substrate.

pub mod gradcheck;
pub mod kernels;
mod layers;
mod loss;
mod network;
mod optim;

pub use layers::{conv2d_forward, dense_forward, maxpool2_forward, Conv2d, Dense, Layer};
pub use loss::softmax_xent;
pub use network::{kaiming, Gradients, Network, ParamCoord, ParamGrad, ParamKind};
pub use optim::SgdState;
