//! Monocular front-camera to bird's-eye-view semantic segmentation with a
//! vision-transformer encoder, multi-scale reassembly and a polar
//! collapse/expand decoder, built on a small reverse-mode autodiff engine.

pub mod decoder;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod layers;
pub mod loss;
pub mod model;
pub mod reassembly;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
