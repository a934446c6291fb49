//! Dual-conditional diffusion for point cloud semantic segmentation.
//!
//! A denoising diffusion model that treats per-point class labels as the
//! diffusion state: labels are noised to Gaussian static and a conditional
//! U-Net learns to run the process backwards, generating a label per point.
//! Two conditions steer the reverse process: a per-point semantic feature
//! field from a frozen pretrained encoder, and a local position encoding
//! shared by every block of both networks.
//!
//! The crate is self-contained: tensors, reverse-mode autodiff, FFT kernels,
//! neighbor search, training, evaluation, and a CLI all live here, with no
//! runtime dependencies.

pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod condition;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fft;
pub mod geometry;
pub mod network;
pub mod nn;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
