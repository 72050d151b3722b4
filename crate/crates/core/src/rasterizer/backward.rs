use nalgebra::{Matrix2, Vector2, Vector3, Vector6};
use rayon::prelude::*;

use super::project::{project_backward, Splat2DGrad};
use super::{
    note_feature_allocation, CameraIntrinsics, Pose, RenderFlags, RenderOutput, ALPHA_MAX,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::scene::GaussianMap;

/// Per-Gaussian parameter gradients, indexed like the map.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGradients {
    pub position: Vec<Vector3<f64>>,
    /// With respect to the stored (pre-normalization) quaternion `(w,x,y,z)`.
    pub rotation: Vec<[f64; 4]>,
    pub log_scale: Vec<Vector3<f64>>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<Vector3<f64>>,
    /// Flat `len x feature_dim`, present when features were rendered.
    pub feature: Option<Vec<f64>>,
}

impl GaussianGradients {
    pub fn zeros(n: usize, feature_dim: Option<usize>) -> Self {
        Self {
            position: vec![Vector3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            log_scale: vec![Vector3::zeros(); n],
            opacity_logit: vec![0.0; n],
            color: vec![Vector3::zeros(); n],
            feature: feature_dim.map(|d| vec![0.0; n * d]),
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    /// True when every non-feature gradient is exactly zero.
    pub fn geometry_is_zero(&self) -> bool {
        self.position.iter().all(|v| v.iter().all(|&x| x == 0.0))
            && self.rotation.iter().all(|v| v.iter().all(|&x| x == 0.0))
            && self.log_scale.iter().all(|v| v.iter().all(|&x| x == 0.0))
            && self.opacity_logit.iter().all(|&x| x == 0.0)
            && self.color.iter().all(|v| v.iter().all(|&x| x == 0.0))
    }
}

#[derive(Clone, Copy, Default)]
struct Local {
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    color: Vector3<f64>,
    depth: f64,
}

struct TileGrad {
    local: Vec<Local>,
    features: Vec<f64>,
}

/// Backpropagates image-space gradients through the compositing and the
/// projection.
///
/// `dl_dfeature` reaches only the feature vectors: it contributes nothing to
/// opacity, geometry, color or pose gradients.
#[allow(clippy::too_many_arguments)]
pub fn render_backward(
    map: &GaussianMap,
    pose: &Pose,
    intr: &CameraIntrinsics,
    flags: RenderFlags,
    out: &RenderOutput,
    dl_dcolor: &Image,
    dl_ddepth: &Image,
    dl_dfeature: Option<&Image>,
    want_pose_grad: bool,
) -> Result<(GaussianGradients, Option<Vector6<f64>>)> {
    let (w, h) = (intr.width, intr.height);
    let aux = &out.aux;
    if aux.map_len != map.len() {
        return Err(Error::dim(format!(
            "render output was produced for {} gaussians, map has {}",
            aux.map_len,
            map.len()
        )));
    }
    if aux.feature_dim != map.feature_dim() {
        return Err(Error::dim("render output feature_dim differs from the map"));
    }
    dl_dcolor.check_shape(w, h, 3, "dL/dcolor")?;
    dl_ddepth.check_shape(w, h, 1, "dL/ddepth")?;
    out.color.check_shape(w, h, 3, "render output")?;
    let nf = map.feature_dim();
    let feature_grad = match (flags.render_features, dl_dfeature) {
        (true, Some(g)) => {
            g.check_shape(w, h, nf, "dL/dfeature")?;
            if out.features.is_none() {
                return Err(Error::dim("render output has no feature image"));
            }
            Some(g)
        }
        (false, Some(_)) => {
            return Err(Error::dim(
                "feature gradient supplied but features were not rendered",
            ))
        }
        (_, None) => None,
    };
    let nfg = if feature_grad.is_some() { nf } else { 0 };
    if nfg > 0 {
        note_feature_allocation();
    }
    let geometry_active = dl_dcolor.data().iter().any(|&v| v != 0.0)
        || dl_ddepth.data().iter().any(|&v| v != 0.0);

    let tile_grads: Vec<TileGrad> = aux
        .tiles
        .par_iter()
        .map(|tile| {
            let slots = tile.splats.len();
            let mut local = vec![Local::default(); slots];
            let mut features = vec![0.0; slots * nfg];
            for ly in 0..tile.height {
                let py = (tile.y0 + ly) as f64;
                for lx in 0..tile.width {
                    let px = (tile.x0 + lx) as f64;
                    let p = ly * tile.width + lx;
                    let gi = (tile.y0 + ly) * w + tile.x0 + lx;
                    let range = tile.offsets[p] as usize..tile.offsets[p + 1] as usize;
                    if range.is_empty() {
                        continue;
                    }
                    let gc = dl_dcolor.pixel(gi);
                    let gd = dl_ddepth.data()[gi];
                    let gf = feature_grad.map(|g| g.pixel(gi));
                    if let Some(gf) = gf {
                        for e in &tile.entries[range.clone()] {
                            let wgt = e.alpha * e.transmittance;
                            let dst = &mut features[e.slot as usize * nfg..(e.slot as usize + 1) * nfg];
                            for (d, g) in dst.iter_mut().zip(gf) {
                                *d += g * wgt;
                            }
                        }
                    }
                    if !geometry_active {
                        continue;
                    }
                    // Back-to-front with suffix sums of the already-composited tail.
                    let mut tail_c = Vector3::zeros();
                    let mut tail_d = 0.0;
                    for e in tile.entries[range].iter().rev() {
                        let slot = e.slot as usize;
                        let s = &aux.splats[tile.splats[slot] as usize];
                        let g = &map.gaussians[s.gaussian];
                        let a = e.alpha;
                        let t = e.transmittance;
                        let wgt = a * t;
                        let l = &mut local[slot];
                        l.color += Vector3::new(gc[0], gc[1], gc[2]) * wgt;
                        l.depth += gd * wgt;

                        let inv = 1.0 / (1.0 - a);
                        let dc_da = g.color * t - tail_c * inv;
                        let dd_da = s.depth * t - tail_d * inv;
                        let g_alpha = gc[0] * dc_da[0] + gc[1] * dc_da[1] + gc[2] * dc_da[2] + gd * dd_da;
                        tail_c += g.color * wgt;
                        tail_d += s.depth * wgt;

                        let (power, dx, dy) = s.power(px, py);
                        let falloff = power.exp();
                        let raw = s.opacity * falloff;
                        if raw > ALPHA_MAX {
                            continue;
                        }
                        l.opacity += g_alpha * falloff;
                        let g_power = g_alpha * raw;
                        let [ca, cb, cc] = s.conic;
                        l.mean += Vector2::new(ca * dx + cb * dy, cb * dx + cc * dy) * g_power;
                        let hp = -0.5 * g_power;
                        l.conic += Matrix2::new(dx * dx, dx * dy, dx * dy, dy * dy) * hp;
                    }
                }
            }
            TileGrad { local, features }
        })
        .collect();

    // Fixed-order reduction into per-splat accumulators.
    let ns = aux.splats.len();
    let mut per_splat = vec![Local::default(); ns];
    let mut per_splat_f = vec![0.0; ns * nfg];
    for (tile, tg) in aux.tiles.iter().zip(&tile_grads) {
        for (slot, &sid) in tile.splats.iter().enumerate() {
            let sid = sid as usize;
            let l = &tg.local[slot];
            let d = &mut per_splat[sid];
            d.mean += l.mean;
            d.conic += l.conic;
            d.opacity += l.opacity;
            d.color += l.color;
            d.depth += l.depth;
            if nfg > 0 {
                let src = &tg.features[slot * nfg..(slot + 1) * nfg];
                for (a, b) in per_splat_f[sid * nfg..(sid + 1) * nfg].iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
    }

    let mut grads = GaussianGradients::zeros(map.len(), (nfg > 0).then_some(nf));
    let geometry: Vec<Option<super::project::GeometryGrad>> = if geometry_active {
        per_splat
            .par_iter()
            .enumerate()
            .map(|(sid, l)| {
                let up = Splat2DGrad {
                    mean2d: l.mean,
                    conic: l.conic,
                    depth: l.depth,
                };
                Some(project_backward(&aux.caches[sid], pose, intr, &up))
            })
            .collect()
    } else {
        vec![None; ns]
    };

    let mut pose_grad = Vector6::zeros();
    for (sid, s) in aux.splats.iter().enumerate() {
        let gi = s.gaussian;
        let l = &per_splat[sid];
        if let Some(gg) = &geometry[sid] {
            grads.position[gi] = gg.position;
            grads.rotation[gi] = gg.rotation;
            grads.log_scale[gi] = gg.log_scale;
            grads.opacity_logit[gi] = l.opacity * s.opacity * (1.0 - s.opacity);
            grads.color[gi] = l.color;
            pose_grad += gg.pose;
        }
        if let Some(f) = grads.feature.as_mut() {
            f[gi * nf..(gi + 1) * nf].copy_from_slice(&per_splat_f[sid * nfg..(sid + 1) * nfg]);
        }
    }
    Ok((grads, want_pose_grad.then_some(pose_grad)))
}
