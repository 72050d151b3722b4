//! Dense semantic RGB-D SLAM on differentiable 3D Gaussian splatting.
//!
//! The map is a set of anisotropic Gaussians carrying color and an
//! N-dimensional feature embedding. Color, depth and feature images are
//! produced by front-to-back alpha compositing; the backward pass yields
//! gradients for every Gaussian parameter and for the camera pose, with
//! feature-image gradients confined to the feature field.
//!
//! Module overview:
//! - [`scene`]: Gaussian primitives, map, visibility records, map export.
//! - [`rasterizer`]: projection, tiled compositing, analytic backward pass.
//! - [`optimizer`]: Adam and the exponential position learning-rate schedule.
//! - [`tracker`]: per-frame pose estimation.
//! - [`mapper`]: keyframe selection, seeding, windowed map optimization.
//! - [`semantics`]: feature-field optimization under labels or feature priors.
//! - [`dataio`]: dataset loaders, synthetic sequences, trajectory files.
//! - [`metrics`]: ATE, PSNR, SSIM, accuracy and mIoU.
//! - [`pipeline`]: configuration and the tracking/mapping orchestration.

pub mod dataio;
pub mod error;
pub mod image;
pub mod mapper;
pub mod metrics;
pub mod optimizer;
pub mod pipeline;
pub mod rasterizer;
pub mod scene;
pub mod semantics;
pub mod tracker;

mod textfmt;

pub use error::{Error, Result};
