//! Learned lossy image compression: a convolutional auto-encoder whose
//! quantized latent is entropy coded with a causal 3D-CNN context model.

pub mod ablation;
pub mod autoencoder;
pub mod cli;
pub mod codec;
pub mod context_model;
pub mod data;
pub mod error;
pub mod image_io;
pub mod importance;
pub mod metrics;
pub mod model_file;
pub mod nn;
pub mod quantizer;
pub mod tensor;

pub use error::{Error, Result};
