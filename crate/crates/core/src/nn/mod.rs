//! Minimal dense tensor engine: convolutions, batch norm, Adam, and layer plumbing.

pub mod batchnorm;
pub mod conv;
pub mod layers;
pub mod optim;

pub use batchnorm::{batch_norm, batch_norm_backward, BnCache, BnGrads, BnMode, RunningStats};
pub use conv::{conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward, ConvGeometry, ConvGrads};
pub use optim::Adam;
