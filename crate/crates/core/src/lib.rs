//! Context-adaptive convolution (CaC) feature re-weighting.
//!
//! A CaC module predicts a small stack of depth-wise kernels from the whole
//! feature map, convolves the features with them at several dilations and
//! uses the sigmoid responses as per-position channel weights. This crate
//! holds the module with hand-written gradients, the alternative
//! re-weighting schemes it is compared against, a toy segmentation network
//! and trainer, a synthetic task where position matters, and the file
//! formats used by the `cac` command-line tool.

pub mod accounting;
pub mod baselines;
pub mod cac;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{CacError, Result};
pub use tensor::{PaddingMode, Tensor};
