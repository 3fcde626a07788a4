//! Continuous-scale single-image super-resolution built around a
//! differential-prior latent diffusion model.
//!
//! The crate provides:
//! - a data pipeline (PNG I/O, bicubic degradation, continuous-scale patch
//!   sampling, augmentation),
//! - a differential-prior autoencoder with KL or VQ latent regularization,
//! - a scale-modulated SR decoder with an implicit-function continuous
//!   upsampler,
//! - a few-step conditional latent diffusion model with both training
//!   stages and the stochastic inference sampler,
//! - PSNR evaluation and a CLI (`degrade`, `train-stage1`, `train-stage2`,
//!   `infer`, `eval`).

pub mod cli;
pub mod data;
pub mod error;
pub mod infer;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
