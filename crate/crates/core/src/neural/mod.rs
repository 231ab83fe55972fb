//! Layers with explicit forward/backward passes, loss functions, optimizers,
//! the training loop, finite-difference gradient checking, and the binary
//! checkpoint format.
//!
//! There is no autograd tape: every layer implements its own analytic
//! backward pass, and [`gradcheck`] verifies each of them against central
//! finite differences. Training follows the usual four steps per batch:
//! forward, loss, backpropagation, parameter update.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod network;
pub mod optim;

use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("numeric failure in {location}: {detail}")]
    Numeric { location: String, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
}

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointInput, CheckpointManifest};
pub use gradcheck::{
    gradient_check, gradient_check_subset, CheckLoss, GradCheckFailure, GradCheckReport,
};
pub use layers::{
    avgpool_backward, avgpool_forward, batchnorm_backward, batchnorm_forward, conv_backward,
    conv_forward, fc_backward, fc_forward, grad_reversal_backward, grad_reversal_forward,
    maxpool_backward, maxpool_forward, relu_backward, relu_forward, softmax, softmax_backward,
    BatchNorm, BnCache, BnMode, BnStats, ConvLayer, FcLayer,
};
pub use loss::{
    ce_classification_grad, ce_segmentation_grad, loss_ce_classification, loss_ce_segmentation,
    loss_combined, loss_mse, loss_soft_dice, loss_weighted_ce, mse_grad, soft_dice_grad,
    weighted_ce_grad, LossReport, PROB_FLOOR,
};
pub use network::{
    default_regression_network, train_epoch, Batch, FeatureShape, Layer, LayerSpec, Network,
};
pub use optim::{adam_step, cosine_lr, sgd_step, AdamHyper, OptimState, OptimizerKind, Schedule};
