//! Dual-page book image rectification.
//!
//! The crate predicts dense backward warping flows for photographed book
//! spreads (one per page plus one for the whole spread) and rectifies images
//! by bilinear sampling. It contains everything needed to train and evaluate
//! such a model from scratch:
//!
//! - [`autodiff`]: a small reverse-mode differentiation tape over [`Tensor`]s.
//! - [`geometry`]: warping flows, bilinear sampling, convex upsampling, inversion.
//! - [`model`]: the dual-branch network with cross-page attention.
//! - [`synth`]: a parametric generator of distorted spreads with exact flows.
//! - [`train`]: multi-task flow loss, AdamW, one-cycle schedule, training loop.
//! - [`metrics`]: MS-SSIM, local/aligned distortion, edit distance and CER.

pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod imageio;
pub mod metrics;
pub mod model;
pub mod selfcheck;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
