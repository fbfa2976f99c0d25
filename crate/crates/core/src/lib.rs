//! Two-stage frequency-spatial low-light image enhancement.
//!
//! The crate is self-contained: [`tensor`] provides dense tensors with
//! reverse-mode autodiff, [`fourier`] the differentiable orthonormal 2-D FFT
//! with amplitude/phase decomposition, and the remaining modules assemble the
//! network, its losses, the data pipeline and the training loop.

pub mod error;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod fourier;
pub mod gradcheck;
pub mod gradsuite;
pub mod iem;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
