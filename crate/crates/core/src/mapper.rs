//! Keyframe selection, Gaussian seeding and windowed map optimization.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Frame;
use crate::error::{Error, Result};
use crate::optimizer::{adam_step, scheduled_lr, AdamState, LearningRates};
use crate::rasterizer::{render, render_backward, CameraIntrinsics, Pose, RenderFlags, RenderOutput};
use crate::scene::{logit, Gaussian, GaussianMap, VisibilityRecord, IDENTITY_QUAT};
use crate::tracker::masked_l1_loss;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingConfig {
    pub lambda_m: f64,
    pub lambda_r: f64,
    pub tau_thresh: f64,
    pub rho_pc: f64,
    pub init_iterations: usize,
    pub kf_iterations: usize,
    pub window_len: usize,
    /// Depth disagreement (meters) that marks a pixel as unexplained.
    pub depth_error_threshold: f64,
    /// Rendered alpha below which a pixel counts as unseen.
    pub unseen_alpha: f64,
    pub seed_opacity: f64,
    /// Multiplies the one-pixel footprint used as the initial seed scale.
    pub seed_scale_factor: f64,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            lambda_m: 0.9,
            lambda_r: 10.0,
            tau_thresh: 0.95,
            rho_pc: 1.0 / 16.0,
            init_iterations: 1000,
            kf_iterations: 20,
            window_len: 10,
            depth_error_threshold: 0.05,
            unseen_alpha: 0.5,
            seed_opacity: 0.5,
            seed_scale_factor: 1.0,
        }
    }
}

impl MappingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_m) {
            return Err(Error::Config(format!("lambda_m {} outside [0,1]", self.lambda_m)));
        }
        if !(self.tau_thresh > 0.0 && self.tau_thresh < 1.0) {
            return Err(Error::Config(format!("tau_thresh {} outside (0,1)", self.tau_thresh)));
        }
        if !(self.rho_pc > 0.0 && self.rho_pc <= 1.0) {
            return Err(Error::Config(format!("rho_pc {} outside (0,1]", self.rho_pc)));
        }
        if self.window_len == 0 {
            return Err(Error::Config("window_len must be positive".into()));
        }
        if !(self.seed_opacity > 0.0 && self.seed_opacity < 1.0) || !(self.seed_scale_factor > 0.0) {
            return Err(Error::Config("invalid seed opacity or scale factor".into()));
        }
        Ok(())
    }
}

/// `|a ∧ b| / |a ∨ b|` over the common prefix; two empty sets give 1.
pub fn covisibility_iou(a: &VisibilityRecord, b: &VisibilityRecord) -> f64 {
    let n = a.len().min(b.len());
    let full = n / 64;
    let (wa, wb) = (a.words(), b.words());
    let mut inter = 0u64;
    let mut union = 0u64;
    for i in 0..full {
        inter += (wa[i] & wb[i]).count_ones() as u64;
        union += (wa[i] | wb[i]).count_ones() as u64;
    }
    let rem = n % 64;
    if rem > 0 {
        let mask = (1u64 << rem) - 1;
        inter += (wa[full] & wb[full] & mask).count_ones() as u64;
        union += ((wa[full] | wb[full]) & mask).count_ones() as u64;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn is_keyframe(iou: f64, cfg: &MappingConfig) -> bool {
    iou < cfg.tau_thresh
}

#[derive(Clone, Debug)]
pub struct KeyframeEntry {
    pub frame_id: usize,
    pub frame: Arc<Frame>,
    pub pose: Pose,
    pub visibility: VisibilityRecord,
}

/// FIFO window of the most recent keyframes.
#[derive(Clone, Debug)]
pub struct KeyframeWindow {
    entries: VecDeque<KeyframeEntry>,
    max_len: usize,
}

impl KeyframeWindow {
    pub fn new(max_len: usize) -> Self {
        Self {
            entries: VecDeque::new(),
            max_len: max_len.max(1),
        }
    }

    /// Appends a keyframe, evicting the oldest when full. Ids must increase.
    pub fn push(&mut self, entry: KeyframeEntry) -> Result<Option<KeyframeEntry>> {
        if let Some(last) = self.entries.back() {
            if entry.frame_id <= last.frame_id {
                return Err(Error::Config(format!(
                    "keyframe id {} not after {}",
                    entry.frame_id, last.frame_id
                )));
            }
        }
        self.entries.push_back(entry);
        Ok(if self.entries.len() > self.max_len {
            self.entries.pop_front()
        } else {
            None
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn entries(&self) -> impl DoubleEndedIterator<Item = &KeyframeEntry> + ExactSizeIterator {
        self.entries.iter()
    }

    pub fn newest(&self) -> Option<&KeyframeEntry> {
        self.entries.back()
    }

    pub fn newest_mut(&mut self) -> Option<&mut KeyframeEntry> {
        self.entries.back_mut()
    }

    pub fn get(&self, i: usize) -> Option<&KeyframeEntry> {
        self.entries.get(i)
    }
}

/// Pixels that the current map leaves unexplained.
pub fn unseen_pixels(frame: &Frame, rendered: &RenderOutput, cfg: &MappingConfig) -> Vec<usize> {
    let depth = frame.depth.data();
    (0..depth.len())
        .filter(|&p| {
            let d = depth[p];
            d > 0.0
                && (rendered.alpha.data()[p] < cfg.unseen_alpha
                    || (rendered.depth.data()[p] - d).abs() > cfg.depth_error_threshold)
        })
        .collect()
}

/// Back-projects a random `rho_pc` fraction of the unexplained pixels into
/// new Gaussians. The subset depends only on `seed` and the frame id.
pub fn seed_gaussians(
    frame: &Frame,
    pose: &Pose,
    intr: &CameraIntrinsics,
    map: &GaussianMap,
    rendered: &RenderOutput,
    cfg: &MappingConfig,
    seed: u64,
) -> Vec<Gaussian> {
    let candidates = unseen_pixels(frame, rendered, cfg);
    let keep = ((candidates.len() as f64) * cfg.rho_pc).round() as usize;
    if keep == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (frame.frame_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut picked: Vec<usize> = sample(&mut rng, candidates.len(), keep).into_iter().map(|i| candidates[i]).collect();
    picked.sort_unstable();
    let cam_to_world = pose.inverse();
    let w = frame.width();
    let opacity_logit = logit(cfg.seed_opacity);
    picked
        .into_iter()
        .map(|p| {
            let (u, v) = ((p % w) as f64, (p / w) as f64);
            let z = frame.depth.data()[p];
            let position = cam_to_world.transform(&intr.back_project(u, v, z));
            let c = frame.rgb.pixel(p);
            let ls = (cfg.seed_scale_factor * z / intr.fx).ln();
            Gaussian {
                position,
                rotation: IDENTITY_QUAT,
                log_scale: Vector3::new(ls, ls, ls),
                opacity_logit,
                color: Vector3::new(c[0], c[1], c[2]),
                feature: vec![0.0; map.feature_dim()],
            }
        })
        .collect()
}

/// Mean L1 distance of each activated scale to the mean scale, and its
/// gradient with respect to each Gaussian's activated scale. The mean is
/// held constant in the gradient.
pub fn regularization_loss(map: &GaussianMap) -> (f64, Vec<Vector3<f64>>) {
    let n = map.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let scales: Vec<Vector3<f64>> = map.gaussians.iter().map(|g| g.scale()).collect();
    let mean = scales.iter().sum::<Vector3<f64>>() / n as f64;
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    let grads = scales
        .iter()
        .map(|s| {
            let d = s - mean;
            loss += d.abs().sum();
            // Deviations at rounding level of the mean count as equal.
            d.zip_map(&mean, |v, m| {
                if v.abs() <= 1e-12 * m.abs() {
                    0.0
                } else {
                    inv * v.signum()
                }
            })
        })
        .collect();
    (loss * inv, grads)
}

/// Adam moments for every mapped parameter group, grown as the map grows.
#[derive(Clone, Debug)]
pub struct MapOptimizer {
    pub position: AdamState,
    pub rotation: AdamState,
    pub log_scale: AdamState,
    pub opacity: AdamState,
    pub color: AdamState,
    /// Mapping steps taken so far (drives the position schedule).
    pub steps: u64,
    pub skipped_iterations: u64,
}

impl Default for MapOptimizer {
    fn default() -> Self {
        Self {
            position: AdamState::new(0),
            rotation: AdamState::new(0),
            log_scale: AdamState::new(0),
            opacity: AdamState::new(0),
            color: AdamState::new(0),
            steps: 0,
            skipped_iterations: 0,
        }
    }
}

impl MapOptimizer {
    fn grow(&mut self, n: usize) {
        self.position.grow(3 * n);
        self.rotation.grow(4 * n);
        self.log_scale.grow(3 * n);
        self.opacity.grow(n);
        self.color.grow(3 * n);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MappingStats {
    pub iterations: usize,
    pub skipped: usize,
    pub last_loss: f64,
}

fn flat3(v: impl Iterator<Item = Vector3<f64>>) -> Vec<f64> {
    v.flat_map(|x| [x.x, x.y, x.z]).collect()
}

/// Optimizes every non-feature Gaussian parameter against the window's
/// frames, one frame per iteration, newest first and then round-robin.
#[allow(clippy::too_many_arguments)]
pub fn optimize_map(
    map: &mut GaussianMap,
    window: &KeyframeWindow,
    intr: &CameraIntrinsics,
    cfg: &MappingConfig,
    lr: &LearningRates,
    opt: &mut MapOptimizer,
    iterations: usize,
) -> Result<MappingStats> {
    if window.is_empty() {
        return Err(Error::Config("mapping window is empty".into()));
    }
    let n = map.len();
    opt.grow(n);
    let mut stats = MappingStats::default();
    let len = window.len();
    for it in 0..iterations {
        let entry = window.get((len - 1 + it) % len).expect("index within window");
        let frame = &entry.frame;
        let out = render(map, &entry.pose, intr, RenderFlags::GEOMETRY)?;
        let all = vec![true; frame.depth.num_pixels()];
        let photo = masked_l1_loss(&out, frame, &all, &all, cfg.lambda_m)?;
        let (reg, reg_grad) = regularization_loss(map);
        let loss = photo.loss + cfg.lambda_r * reg;
        stats.iterations += 1;
        if !loss.is_finite() {
            stats.skipped += 1;
            opt.skipped_iterations += 1;
            continue;
        }
        stats.last_loss = loss;
        let (g, _) = render_backward(
            map,
            &entry.pose,
            intr,
            RenderFlags::GEOMETRY,
            &out,
            &photo.dl_dcolor,
            &photo.dl_ddepth,
            None,
            false,
        )?;

        let gs = &mut map.gaussians;
        let mut pos = flat3(gs.iter().map(|g| g.position));
        let mut rot: Vec<f64> = gs.iter().flat_map(|g| g.rotation).collect();
        let mut ls = flat3(gs.iter().map(|g| g.log_scale));
        let mut op: Vec<f64> = gs.iter().map(|g| g.opacity_logit).collect();
        let mut col = flat3(gs.iter().map(|g| g.color));

        let g_pos = flat3(g.position.iter().copied());
        let g_rot: Vec<f64> = g.rotation.iter().flatten().copied().collect();
        let g_ls = flat3(
            g.log_scale
                .iter()
                .zip(&reg_grad)
                .zip(gs.iter())
                .map(|((gl, gr), gau)| gl + cfg.lambda_r * gr.component_mul(&gau.scale())),
        );
        let g_col = flat3(g.color.iter().copied());

        let pos_lr = scheduled_lr(&lr.position, opt.steps);
        adam_step(&mut pos, &g_pos, &mut opt.position, pos_lr)?;
        adam_step(&mut rot, &g_rot, &mut opt.rotation, lr.rotation)?;
        adam_step(&mut ls, &g_ls, &mut opt.log_scale, lr.scaling)?;
        adam_step(&mut op, &g.opacity_logit, &mut opt.opacity, lr.opacity)?;
        adam_step(&mut col, &g_col, &mut opt.color, lr.color)?;
        opt.steps += 1;

        for (i, gau) in gs.iter_mut().enumerate() {
            gau.position = Vector3::new(pos[3 * i], pos[3 * i + 1], pos[3 * i + 2]);
            gau.rotation = [rot[4 * i], rot[4 * i + 1], rot[4 * i + 2], rot[4 * i + 3]];
            gau.renormalize_rotation();
            gau.log_scale = Vector3::new(ls[3 * i], ls[3 * i + 1], ls[3 * i + 2]);
            gau.opacity_logit = op[i];
            gau.color = Vector3::new(col[3 * i], col[3 * i + 1], col[3 * i + 2]).map(|c| c.clamp(0.0, 1.0));
        }
    }
    Ok(stats)
}
