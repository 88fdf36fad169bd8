//! Residual multi-level feature fusion for semantic segmentation.
//!
//! A desk-scale, CPU-only implementation of an encoder-decoder segmentation
//! framework in which low-level and high-level encoder features are fused
//! through a residual decoder, enhanced by five mechanisms: semantic
//! supervision heads on the encoder stages, layer rearrangement of stage
//! depths, a semantic embedding branch, explicit channel-resolution embedding
//! via sub-pixel upsampling, and densely adjacent prediction. Everything from
//! the tensor engine up is built here: reverse-mode autodiff, the blocks, a
//! synthetic shapes dataset, the training loop and an ablation harness.

pub mod ablate;
pub mod blocks;
pub mod config;
pub mod encoder;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Labels, Precision, Shape, Tensor, IGNORE_LABEL};
