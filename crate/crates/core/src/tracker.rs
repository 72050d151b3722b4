//! Per-frame camera tracking against a frozen map.
//!
//! Each iteration renders the map at the current pose, evaluates the masked
//! color + depth L1 loss, backpropagates to a 6-DoF pose gradient and takes
//! an Adam step on the pose increment, applied on the left.

use nalgebra::Vector6;
use serde::{Deserialize, Serialize};

use crate::dataio::Frame;
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::optimizer::{adam_step, AdamState, LearningRates};
use crate::rasterizer::{
    apply_pose_delta, render, render_backward, CameraIntrinsics, Pose, RenderFlags, RenderOutput,
};
use crate::scene::{GaussianMap, VisibilityRecord};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingConfig {
    pub lambda_t: f64,
    pub max_iterations: usize,
    pub convergence_eps: f64,
    pub edge_keep_fraction: f64,
    /// Rendered alpha above which a pixel enters the visibility mask.
    pub visibility_alpha: f64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            lambda_t: 0.9,
            max_iterations: 200,
            convergence_eps: 1e-4,
            edge_keep_fraction: 0.6,
            visibility_alpha: 0.95,
        }
    }
}

impl TrackingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_t) {
            return Err(Error::Config(format!("lambda_t {} outside [0,1]", self.lambda_t)));
        }
        if !(self.convergence_eps > 0.0) {
            return Err(Error::Config("convergence_eps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.edge_keep_fraction) {
            return Err(Error::Config("edge_keep_fraction outside [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrackingResult {
    pub pose: Pose,
    pub iterations_used: usize,
    pub final_loss: f64,
    pub visibility: VisibilityRecord,
    pub converged: bool,
}

/// Sobel gradient magnitude of the grayscale image, borders replicated.
pub fn sobel_magnitude(rgb: &Image) -> Vec<f64> {
    let gray = rgb.to_gray();
    let (w, h) = (gray.width(), gray.height());
    let g = gray.data();
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        g[y * w + x]
    };
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x - 1, y)
                - at(x - 1, y + 1);
            let gy = at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x, y - 1)
                - at(x + 1, y - 1);
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Keeps pixels whose Sobel magnitude is at least the `(1 - keep)` quantile.
pub fn edge_mask(rgb: &Image, keep_fraction: f64) -> Mask {
    let (w, h) = (rgb.width(), rgb.height());
    let mag = sobel_magnitude(rgb);
    if mag.is_empty() || keep_fraction <= 0.0 {
        return Mask::filled(w, h, false);
    }
    let mut sorted = mag.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let drop = ((1.0 - keep_fraction.min(1.0)) * n as f64).floor() as usize;
    let threshold = sorted[drop.min(n - 1)];
    Mask {
        width: w,
        height: h,
        data: mag.iter().map(|&m| m >= threshold).collect(),
    }
}

/// Loss value and its image-space subgradients.
#[derive(Clone, Debug)]
pub struct ImageLoss {
    pub loss: f64,
    pub dl_dcolor: Image,
    pub dl_ddepth: Image,
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Masked L1 color + depth loss shared by tracking and mapping.
///
/// `color_mask[p]` selects pixels for the color term, `depth_mask[p]` for the
/// depth term (both are additionally restricted to valid frame depth for
/// depth). Each term is a mean over its selected pixels; the color term sums
/// the three channel errors per pixel.
pub fn masked_l1_loss(
    rendered: &RenderOutput,
    frame: &Frame,
    color_mask: &[bool],
    depth_mask: &[bool],
    lambda: f64,
) -> Result<ImageLoss> {
    let (w, h) = (frame.width(), frame.height());
    rendered.color.check_shape(w, h, 3, "rendered color")?;
    frame.depth.check_shape(w, h, 1, "frame depth")?;
    let n = w * h;
    if color_mask.len() != n || depth_mask.len() != n {
        return Err(Error::dim("mask size differs from the frame"));
    }
    let nc = color_mask.iter().filter(|&&b| b).count();
    let nd = (0..n).filter(|&p| depth_mask[p] && frame.depth.data()[p] > 0.0).count();
    let wc = if nc > 0 { lambda / nc as f64 } else { 0.0 };
    let wd = if nd > 0 { (1.0 - lambda) / nd as f64 } else { 0.0 };
    let mut dl_dcolor = Image::zeros(w, h, 3);
    let mut dl_ddepth = Image::zeros(w, h, 1);
    let mut lc = 0.0;
    let mut ld = 0.0;
    for p in 0..n {
        if color_mask[p] {
            let r = rendered.color.pixel(p);
            let f = frame.rgb.pixel(p);
            let g = dl_dcolor.pixel_mut(p);
            for c in 0..3 {
                let e = r[c] - f[c];
                lc += e.abs();
                g[c] = wc * sign(e);
            }
        }
        let fd = frame.depth.data()[p];
        if depth_mask[p] && fd > 0.0 {
            let e = rendered.depth.data()[p] - fd;
            ld += e.abs();
            dl_ddepth.data_mut()[p] = wd * sign(e);
        }
    }
    Ok(ImageLoss {
        loss: wc * lc + wd * ld,
        dl_dcolor,
        dl_ddepth,
    })
}

/// Visibility mask `m_v`: rendered alpha above `threshold`.
pub fn visibility_mask(rendered: &RenderOutput, threshold: f64) -> Vec<bool> {
    rendered.alpha.data().iter().map(|&a| a > threshold).collect()
}

/// `λ·mean_{m_v ∧ m_e} |ĉ−c|₁ + (1−λ)·mean_{m_v ∧ valid} |d̂−d|`.
pub fn tracking_loss(
    rendered: &RenderOutput,
    frame: &Frame,
    m_e: &Mask,
    lambda_t: f64,
    visibility_alpha: f64,
) -> Result<ImageLoss> {
    let mv = visibility_mask(rendered, visibility_alpha);
    if m_e.data.len() != mv.len() {
        return Err(Error::dim("edge mask size differs from the frame"));
    }
    let color_mask: Vec<bool> = mv.iter().zip(&m_e.data).map(|(&a, &b)| a && b).collect();
    masked_l1_loss(rendered, frame, &color_mask, &mv, lambda_t)
}

/// Constant-velocity prediction of the next pose from the last two.
pub fn extrapolate_pose(prev2: &Pose, prev1: &Pose) -> Pose {
    let motion = prev1.compose(&prev2.inverse());
    let p = motion.compose(prev1);
    apply_pose_delta(&p, &Vector6::zeros())
}

/// Estimates the pose of `frame`, leaving the map untouched.
pub fn track_frame(
    map: &GaussianMap,
    frame: &Frame,
    intr: &CameraIntrinsics,
    init_pose: &Pose,
    cfg: &TrackingConfig,
    lr: &LearningRates,
) -> Result<TrackingResult> {
    if map.is_empty() {
        return Err(Error::Tracking("cannot track against an empty map".into()));
    }
    cfg.validate()?;
    let m_e = edge_mask(&frame.rgb, cfg.edge_keep_fraction);
    let mut pose = *init_pose;
    let mut trans_state = AdamState::new(3);
    let mut rot_state = AdamState::new(3);
    let mut converged = false;
    let mut iterations = 0;
    let numeric = |what: &str| Error::Numeric(format!("frame {}: non-finite tracking {what}", frame.frame_id));

    while iterations < cfg.max_iterations {
        let out = render(map, &pose, intr, RenderFlags::GEOMETRY)?;
        let loss = tracking_loss(&out, frame, &m_e, cfg.lambda_t, cfg.visibility_alpha)?;
        if !loss.loss.is_finite() {
            return Err(numeric("loss"));
        }
        let (_, grad) = render_backward(
            map,
            &pose,
            intr,
            RenderFlags::GEOMETRY,
            &out,
            &loss.dl_dcolor,
            &loss.dl_ddepth,
            None,
            true,
        )?;
        let grad = grad.expect("pose gradient requested");
        let mut t = [0.0; 3];
        let mut r = [0.0; 3];
        adam_step(&mut t, &[grad[0], grad[1], grad[2]], &mut trans_state, lr.pose_translation)?;
        adam_step(&mut r, &[grad[3], grad[4], grad[5]], &mut rot_state, lr.pose_rotation)?;
        let step = Vector6::new(t[0], t[1], t[2], r[0], r[1], r[2]);
        iterations += 1;
        if !step.iter().all(|v| v.is_finite()) {
            return Err(numeric("pose step"));
        }
        pose = apply_pose_delta(&pose, &step);
        if step.norm() < cfg.convergence_eps {
            converged = true;
            break;
        }
    }

    let out = render(map, &pose, intr, RenderFlags::WITH_VISIBILITY)?;
    let loss = tracking_loss(&out, frame, &m_e, cfg.lambda_t, cfg.visibility_alpha)?;
    if !loss.loss.is_finite() {
        return Err(numeric("loss"));
    }
    let mut visibility = out.visibility.expect("visibility requested");
    visibility.frame_id = frame.frame_id;
    Ok(TrackingResult {
        pose,
        iterations_used: iterations,
        final_loss: loss.loss,
        visibility,
        converged,
    })
}
