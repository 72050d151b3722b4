use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Frame;
use crate::error::{Error, Result};
use crate::image::{Image, LabelMap, IGNORE_LABEL};
use crate::rasterizer::{render_reference, CameraIntrinsics, Pose};
use crate::scene::{logit, matrix_to_quat, Gaussian, GaussianMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryKind {
    /// Circle around the table center at constant height.
    Orbit,
    /// Straight sideways pass in front of the table.
    Line,
}

/// Recipe for a desk-scale scene: a textured table disk (class 0) holding
/// one sphere per remaining class, seen by a moving RGB-D camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    pub num_gaussians: usize,
    pub num_classes: usize,
    pub trajectory: TrajectoryKind,
    pub frame_count: usize,
    pub intrinsics: CameraIntrinsics,
    /// Meters from the table axis to the camera.
    pub orbit_radius: f64,
    pub camera_height: f64,
    /// Angle swept by the orbit, degrees.
    pub arc_degrees: f64,
    pub table_radius: f64,
    pub frame_rate: f64,
    /// Round color to 8 bits and depth to `depth_scale` units, so the frames
    /// survive a PNG roundtrip unchanged.
    pub quantize: bool,
    pub depth_scale: f64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_gaussians: 500,
            num_classes: 8,
            trajectory: TrajectoryKind::Orbit,
            frame_count: 100,
            intrinsics: CameraIntrinsics::new(140.0, 140.0, 79.5, 59.5, 160, 120),
            orbit_radius: 1.0,
            camera_height: 0.6,
            arc_degrees: 45.0,
            table_radius: 0.7,
            frame_rate: 30.0,
            quantize: false,
            depth_scale: super::DEFAULT_REPLICA_DEPTH_SCALE,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.num_classes == 0 || self.num_classes > IGNORE_LABEL as usize {
            return Err(Error::Config(format!("num_classes {} out of range", self.num_classes)));
        }
        if self.orbit_radius <= 0.0 || self.table_radius <= 0.0 || self.frame_rate <= 0.0 {
            return Err(Error::Config("synthetic geometry must be positive".into()));
        }
        Ok(())
    }

    /// Ground-truth world-to-camera pose of frame `i`.
    pub fn camera_pose(&self, i: usize) -> Pose {
        let target = Vector3::new(0.0, 0.0, 0.05);
        let up = Vector3::z();
        let t = if self.frame_count > 1 {
            i as f64 / (self.frame_count - 1) as f64
        } else {
            0.0
        };
        let eye = match self.trajectory {
            TrajectoryKind::Orbit => {
                let a = -0.5 * PI + t * self.arc_degrees.to_radians();
                Vector3::new(self.orbit_radius * a.cos(), self.orbit_radius * a.sin(), self.camera_height)
            }
            TrajectoryKind::Line => {
                let x = (t - 0.5) * self.orbit_radius;
                Vector3::new(x, -self.orbit_radius, self.camera_height)
            }
        };
        let target = match self.trajectory {
            TrajectoryKind::Orbit => target,
            TrajectoryKind::Line => Vector3::new(eye.x, 0.0, 0.05),
        };
        Pose::look_at(&eye, &target, &up)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    /// Ground truth, with one-hot class features (`feature_dim = num_classes`).
    pub map: GaussianMap,
    pub classes: Vec<u8>,
    pub frames: Vec<Frame>,
    pub intrinsics: CameraIntrinsics,
}

/// Rotation taking the local z axis onto `n`.
fn align_z(n: &Vector3<f64>) -> [f64; 4] {
    let z = n.normalize();
    let helper = if z.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let x = helper.cross(&z).normalize();
    let y = z.cross(&x);
    let r = nalgebra::Matrix3::from_columns(&[x, y, z]);
    matrix_to_quat(&r)
}

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

fn jitter(rng: &mut ChaCha8Rng, amp: f64) -> f64 {
    rng.random_range(-amp..amp)
}

fn build_map(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> (GaussianMap, Vec<u8>) {
    let n = spec.num_gaussians;
    let c = spec.num_classes;
    let objects = c - 1;
    let n_obj = if objects > 0 && n >= 2 * objects { n / 2 } else { 0 };
    let n_table = n - n_obj;
    let opacity_logit = logit(0.982);
    let one_hot = |k: usize| {
        let mut f = vec![0.0; c];
        f[k] = 1.0;
        f
    };
    let mut gs = Vec::with_capacity(n);
    let mut classes = Vec::with_capacity(n);

    // Table: sunflower disk with per-splat brightness texture.
    let r_table = spec.table_radius;
    let spacing = r_table * (PI / n_table.max(1) as f64).sqrt();
    let wood = Vector3::new(0.62, 0.45, 0.28);
    for i in 0..n_table {
        let r = r_table * ((i as f64 + 0.5) / n_table as f64).sqrt();
        let a = i as f64 * GOLDEN_ANGLE;
        let shade = rng.random_range(0.45..1.25);
        let tint = Vector3::new(jitter(rng, 0.08), jitter(rng, 0.08), jitter(rng, 0.08));
        let color = (wood * shade + tint).map(|v| v.clamp(0.02, 0.98));
        let s = 0.7 * spacing;
        gs.push(Gaussian {
            position: Vector3::new(r * a.cos(), r * a.sin(), 0.0),
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vector3::new(s.ln(), s.ln(), (0.1 * s).ln()),
            opacity_logit,
            color,
            feature: one_hot(0),
        });
        classes.push(0);
    }

    // Objects: spheres on a ring.
    if n_obj > 0 {
        let ring = 0.45 * r_table;
        let phase = rng.random_range(0.0..2.0 * PI);
        for k in 0..objects {
            let count = n_obj / objects + usize::from(k < n_obj % objects);
            let radius = rng.random_range(0.07..0.11);
            let a = phase + 2.0 * PI * k as f64 / objects as f64;
            let rr = if k % 2 == 0 { ring } else { 0.55 * ring };
            let center = Vector3::new(rr * a.cos(), rr * a.sin(), radius);
            let hue = class_color(k + 1);
            let spacing = radius * (4.0 * PI / count.max(1) as f64).sqrt();
            for j in 0..count {
                let zc = 1.0 - 2.0 * (j as f64 + 0.5) / count as f64;
                let rho = (1.0 - zc * zc).sqrt();
                let phi = j as f64 * GOLDEN_ANGLE;
                let normal = Vector3::new(rho * phi.cos(), rho * phi.sin(), zc);
                let shade = rng.random_range(0.6..1.15);
                let color = (hue * shade).map(|v| v.clamp(0.02, 0.98));
                let s = 0.75 * spacing;
                gs.push(Gaussian {
                    position: center + normal * radius,
                    rotation: align_z(&normal),
                    log_scale: Vector3::new(s.ln(), s.ln(), (0.15 * s).ln()),
                    opacity_logit,
                    color,
                    feature: one_hot(k + 1),
                });
                classes.push((k + 1) as u8);
            }
        }
    }
    let mut map = GaussianMap::new(c);
    map.append_gaussians(gs).expect("feature length matches by construction");
    (map, classes)
}

/// Distinct saturated color per object class.
fn class_color(k: usize) -> Vector3<f64> {
    const TABLE: [[f64; 3]; 7] = [
        [0.85, 0.15, 0.15],
        [0.15, 0.7, 0.2],
        [0.2, 0.3, 0.9],
        [0.9, 0.8, 0.1],
        [0.7, 0.2, 0.8],
        [0.1, 0.8, 0.8],
        [0.95, 0.5, 0.1],
    ];
    let c = TABLE[(k - 1) % TABLE.len()];
    Vector3::new(c[0], c[1], c[2])
}

/// Camera depth where the ray through pixel `(u, v)` meets the splat's
/// tangent plane (the plane normal to its thinnest axis). Composited center
/// depths of wide flat splats would disagree with the parallax of the color
/// images, unlike what a depth sensor measures.
fn surface_depth(g: &Gaussian, pose: &Pose, intr: &CameraIntrinsics, u: f64, v: f64) -> Option<f64> {
    let n = pose.rotation * g.rotation_matrix().column(2);
    let mu = pose.transform(&g.position);
    let ray = Vector3::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0);
    let denom = n.dot(&ray);
    // Near-grazing planes give unstable intersections.
    if denom.abs() < 0.2 * ray.norm() {
        return None;
    }
    let z = n.dot(&mu) / denom;
    (z > 0.0).then_some(z)
}

/// Builds the ground-truth map and renders every frame with the
/// brute-force compositor.
pub fn generate_synthetic(spec: &SyntheticSceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (map, classes) = build_map(spec, &mut rng);
    let intr = spec.intrinsics;
    let c = spec.num_classes;
    let frames: Vec<Frame> = (0..spec.frame_count)
        .into_par_iter()
        .map(|i| {
            let pose = spec.camera_pose(i);
            let r = render_reference(&map, &pose, &intr, true);
            let feats = r.features.as_ref().expect("features requested");
            let mut rgb = r.color;
            let mut depth = Image::zeros(intr.width, intr.height, 1);
            let mut labels = LabelMap::filled(intr.width, intr.height, IGNORE_LABEL);
            for p in 0..intr.width * intr.height {
                let a = r.alpha.data()[p];
                if a >= 0.95 {
                    let (u, v) = ((p % intr.width) as f64, (p / intr.width) as f64);
                    depth.data_mut()[p] = r.dominant[p]
                        .and_then(|g| surface_depth(&map.gaussians[g], &pose, &intr, u, v))
                        .unwrap_or(r.depth.data()[p]);
                }
                if a >= 0.5 {
                    // Class with the largest composited weight, ties to the lower index.
                    let f = &feats.data()[p * c..(p + 1) * c];
                    let best = (1..c).fold(0, |b, k| if f[k] > f[b] { k } else { b });
                    labels.data[p] = best as u8;
                }
            }
            if spec.quantize {
                for v in rgb.data_mut() {
                    *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
                }
                for d in depth.data_mut() {
                    *d = (*d * spec.depth_scale).round().min(u16::MAX as f64) / spec.depth_scale;
                }
            }
            Frame {
                frame_id: i,
                timestamp: i as f64 / spec.frame_rate,
                rgb,
                depth,
                gt_label: Some(labels),
                prior_feature_path: None,
                gt_pose: Some(pose),
            }
        })
        .collect();
    Ok(SyntheticScene {
        map,
        classes,
        frames,
        intrinsics: intr,
    })
}
