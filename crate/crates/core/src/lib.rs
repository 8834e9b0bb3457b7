//! Deep hybrid similarity learning for person re-identification.
//!
//! A light siamese CNN (`C1 -> B1 -> M1 -> C2 -> B2 -> M2 -> C3 -> B3 -> M3 -> A1`)
//! maps each 128x48 RGB image to a `d`-dimensional feature. A pair of
//! features is scored by `w_d . |x1 - x2| + w_m . (x1 .* x2)`, and the whole
//! network is trained end to end with an L2-regularized logistic loss on
//! labelled pairs. Evaluation ranks a single-shot gallery for every probe
//! and reports CMC curves.
//!
//! Numeric code is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks); the aliases below fix the common choices.

pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod scalar;
pub mod siamese;
pub mod similarity;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Dims, Tensor4};

/// Single-precision tensor used for images and training.
pub type Tensor = Tensor4<f32>;
/// Double-precision tensor used by gradient checks.
pub type Tensor64 = Tensor4<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type HybridWeights32 = similarity::HybridWeights<f32>;
