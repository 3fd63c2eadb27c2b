//! Deformable registration of multi-contrast MRI studies.
//!
//! Four contrasts per time point are fused by Inception blocks into one
//! image per study; a windowed-attention encoder with a convolutional decoder
//! predicts a dense displacement field, which a spatial transformer applies
//! to the moving image. Training minimises image MSE, a diffusion smoothness
//! penalty and an MSE between Sobel edge maps.

pub mod affine;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod edge;
pub mod error;
pub mod field;
pub mod fusion;
pub mod harness;
pub mod gradcheck;
pub mod landmarks;
pub mod losses;
pub mod metrics;
pub mod nifti;
pub mod nn;
pub mod params;
pub mod preprocess;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod volume;
pub mod warp;

pub use error::{Error, Result};
