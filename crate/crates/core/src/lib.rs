//! Core library for a single-person pose estimation stack built from
//! scratch: dense f64 tensors with hand-written convolution kernels and
//! backward passes, a waterfall atrous decoder head, Gaussian heatmap
//! modulation, a small multi-resolution backbone, a sub-pixel heatmap
//! codec, and keypoint evaluation metrics.

pub mod codec;
pub mod conv;
pub mod gdm;
pub mod error;
pub mod grad;
pub mod io;
pub mod metrics;
pub mod ops;
pub mod selfcheck;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod wasp;

pub use error::{Error, Result};
pub use tensor::Tensor;
