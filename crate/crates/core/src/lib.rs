//! Anisotropism-aware 3D segmentation as a deterministic numerical library.
//!
//! A z-stack is segmented in two stages: a multi-scale 2D fully convolutional
//! network extracts per-slice features, and a bi-directional convolutional
//! LSTM propagates context across slices before a per-pixel softmax produces
//! probability maps. The crate also provides reverse-mode autodiff, training
//! (losses, weight maps, optimizers, augmentation), overlapping-tile
//! inference, evaluation metrics, synthetic tubular phantoms and binary stack
//! I/O.

pub mod autograd;
pub mod check;
pub mod data;
pub mod error;
pub mod fcn;
pub mod metrics;
pub mod parallel;
pub mod pipeline;
pub mod recurrent;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::{Padding, Tensor};
