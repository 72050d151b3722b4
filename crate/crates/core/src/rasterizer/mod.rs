//! Differentiable rendering of color, depth and feature images.
//!
//! Gaussians are projected with the EWA approximation, sorted front to back
//! by camera depth (ties by index), and composited per pixel:
//!
//! ```text
//! out = Σ_i v_i α̂_i T_i,   T_i = Π_{j<i} (1 - α̂_j)
//! ```
//!
//! with `α̂_i = min(0.99, α_i · exp(-½ dᵀ A d))`. Contributions below 1/255
//! are skipped and a pixel stops compositing once the next transmittance
//! would fall below 1e-4. The same rule defines each splat's exact support,
//! so 16x16 tiling reproduces the brute-force compositor in
//! [`render_reference`].
//!
//! The backward pass ([`render_backward`]) returns gradients for every
//! Gaussian parameter group and, optionally, the 6-DoF pose. Gradients from
//! the feature image reach only the feature vectors.

mod backward;
pub mod camera;
mod forward;
pub mod project;
#[cfg(test)]
pub(crate) mod testutil;

use std::sync::atomic::{AtomicUsize, Ordering};

pub use backward::{render_backward, GaussianGradients};
pub use camera::{apply_pose_delta, CameraIntrinsics, Pose};
pub use forward::{render, render_reference};
pub use project::{project, Projected2D};

use crate::image::Image;
use crate::scene::VisibilityRecord;

pub const TILE_SIZE: usize = 16;
/// Upper clamp of the per-pixel opacity.
pub const ALPHA_MAX: f64 = 0.99;
/// Contributions with smaller per-pixel opacity are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// A pixel stops compositing before its transmittance drops below this.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
/// Transmittance on arrival above which a Gaussian counts as visible.
pub const VISIBLE_TRANSMITTANCE: f64 = 0.5;

static FEATURE_BUFFER_ALLOCATIONS: AtomicUsize = AtomicUsize::new(0);

/// Number of feature image / feature gradient buffers allocated by this
/// process so far.
pub fn feature_buffer_allocations() -> usize {
    FEATURE_BUFFER_ALLOCATIONS.load(Ordering::Relaxed)
}

pub(crate) fn note_feature_allocation() {
    FEATURE_BUFFER_ALLOCATIONS.fetch_add(1, Ordering::Relaxed);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RenderFlags {
    pub render_features: bool,
    pub record_visibility: bool,
}

impl RenderFlags {
    pub const GEOMETRY: RenderFlags = RenderFlags {
        render_features: false,
        record_visibility: false,
    };
    pub const WITH_FEATURES: RenderFlags = RenderFlags {
        render_features: true,
        record_visibility: false,
    };
    pub const WITH_VISIBILITY: RenderFlags = RenderFlags {
        render_features: false,
        record_visibility: true,
    };
}

impl Default for RenderFlags {
    fn default() -> Self {
        Self::GEOMETRY
    }
}

/// Image-space splat of one in-frustum Gaussian.
#[derive(Clone, Debug)]
pub(crate) struct Splat {
    pub gaussian: usize,
    pub mean: [f64; 2],
    /// Conic `[[a, b], [b, c]]` stored as `(a, b, c)`.
    pub conic: [f64; 3],
    pub opacity: f64,
    pub depth: f64,
    /// Inclusive pixel bounds `(x0, y0, x1, y1)` of the support.
    pub rect: (usize, usize, usize, usize),
}

impl Splat {
    /// Exponent of the 2D Gaussian falloff at pixel `(px, py)`.
    #[inline]
    pub fn power(&self, px: f64, py: f64) -> (f64, f64, f64) {
        let dx = px - self.mean[0];
        let dy = py - self.mean[1];
        let [a, b, c] = self.conic;
        (-0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy), dx, dy)
    }
}

/// One composited (pixel, splat) pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution {
    /// Index into the owning tile's splat list.
    pub slot: u32,
    /// Clamped per-pixel opacity α̂.
    pub alpha: f64,
    /// Transmittance on arrival.
    pub transmittance: f64,
}

/// Per-tile compositing record used by the backward pass.
#[derive(Clone, Debug, Default)]
pub struct TileContribs {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    /// Splat ids in front-to-back order.
    pub splats: Vec<u32>,
    /// `offsets[p]..offsets[p+1]` indexes `entries` for tile pixel `p`.
    pub offsets: Vec<u32>,
    pub entries: Vec<Contribution>,
}

/// Auxiliary buffers retained from the forward pass.
#[derive(Clone, Debug)]
pub struct RenderAux {
    pub(crate) splats: Vec<Splat>,
    pub(crate) caches: Vec<project::ProjectionCache>,
    pub tiles: Vec<TileContribs>,
    pub(crate) map_len: usize,
    pub(crate) feature_dim: usize,
}

impl RenderAux {
    /// Gaussian index of a splat id.
    pub fn splat_gaussian(&self, splat: u32) -> usize {
        self.splats[splat as usize].gaussian
    }

    pub fn num_splats(&self) -> usize {
        self.splats.len()
    }
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub color: Image,
    /// Unnormalized composited camera depth.
    pub depth: Image,
    /// `1 - final transmittance`.
    pub alpha: Image,
    pub features: Option<Image>,
    pub visibility: Option<VisibilityRecord>,
    pub aux: RenderAux,
}
