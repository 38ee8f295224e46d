//! Simulation and training of diffractive optical neural networks with
//! roughness-aware regularization, block sparsification of the phase masks
//! and 2π-periodic post-training smoothing.

pub mod autograd;
pub mod dataio;
pub mod error;
pub mod fft;
pub mod field;
pub mod roughness;
pub mod slr;
pub mod smoothing;
pub mod train;

pub use error::{DonnError, Result};
