//! Unsupervised temporal action segmentation of skeleton sequences with
//! hierarchical spatiotemporal vector quantization.
//!
//! A sequence `[C, T, V]` is embedded per joint by a dilated temporal
//! convolution encoder, cut into patches of `P` frames and quantized against a
//! subaction codebook and then an action codebook. Two decoders reconstruct
//! the skeleton's inter-joint distances and each patch's timestamp from the
//! quantized patches. Frame labels at inference are the action codebook
//! indices of their patches.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod hvq;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
