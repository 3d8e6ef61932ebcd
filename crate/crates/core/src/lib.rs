//! Token-conditioned score distillation on toy scenes: cameras and warping,
//! point clouds, a differentiable voxel renderer, a small depth-conditioned
//! denoiser, learnable prompt tokens and the staged training pipeline.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod checkpoint;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod pipeline;
pub mod pointcloud;
pub mod raster;
pub mod tokens;
pub mod volume;
pub mod warp;

pub use error::{Error, Result};
