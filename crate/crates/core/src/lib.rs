//! Quantized zeroth-order optimization.
//!
//! Fine-tunes quantized models without backpropagation: the frozen integer
//! weights are never touched, and only the continuous quantization scales (plus
//! any un-quantized parts such as biases) are perturbed along a seeded Gaussian
//! direction. Two forward passes give a directional derivative, which is clipped
//! and fed to zeroth-order SGD; scales are projected back to be non-negative.
//!
//! Module map:
//! - [`tensor`], [`rng`]: dense matrices and the replayable normal stream
//! - [`quant`]: scalar and codebook quantizers, layer file format
//! - [`zo`]: SPSA / Q-SPSA estimation and directional-derivative clipping
//! - [`optim`]: ZO-SGD step, schedules, training hyperparameters
//! - [`models`]: forward-only quantized models, losses, datasets
//! - [`harness`]: training runs, ablations, estimator verification, memory accounting

pub mod error;
pub mod harness;
pub mod models;
pub mod optim;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod zo;

pub use error::{Error, Result};
