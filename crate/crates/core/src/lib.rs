//! Spinal curvature toolkit: Cobb angle geometry from vertebra landmarks,
//! from-scratch convolutional regression networks with analytically derived
//! and finite-difference-verified backpropagation, X-ray-style image
//! preprocessing, dataset plumbing with a synthetic spine generator, and the
//! evaluation metrics (SMAPE, MAE, IoU, Dice) used to score predictions.
//!
//! Determinism is a design constraint throughout: every random choice flows
//! from an explicit seed through [`rng::Rng`], so training runs, synthetic
//! datasets, and checkpoints are byte-reproducible.

pub mod dataset;
pub mod geometry;
pub mod imaging;
pub mod metrics;
pub mod neural;
pub mod rng;
pub mod tensor;

pub use tensor::{conv_output_shape, Shape2D, Tensor};
