//! Wavelet-guided spatial-frequency fusion network for remote-sensing
//! semantic segmentation, with a small reverse-mode autodiff engine.

pub mod accounting;
pub mod audit;
pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod global;
pub mod gradcheck;
pub mod local;
pub mod loss;
pub mod mdaf;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod wavelet;
pub mod wtfd;

pub use error::{Error, Result};
pub use tensor::{Dims, Tensor};
