//! Attention-calibrated U-shaped segmentation networks at desk scale:
//! a small reverse-mode autodiff engine, the attention block, network
//! builder, trainer, synthetic speckle data, and a segmentation metric
//! suite.

pub mod ablation;
pub mod attention;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod metrics;
pub mod network;
pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod seeds;
pub mod selftest;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Elem, Tensor};
