use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::camera::{so3_exp, CameraIntrinsics, Pose};
use crate::scene::{normalize_quat, Gaussian, GaussianMap};

pub fn random_quat(rng: &mut impl Rng) -> [f64; 4] {
    normalize_quat(&[
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ])
}

pub fn random_vec3(rng: &mut impl Rng, lo: f64, hi: f64) -> Vector3<f64> {
    Vector3::new(
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
    )
}

/// `n` random Gaussians in front of a camera at a random pose.
pub fn random_scene(seed: u64, n: usize, feature_dim: usize) -> (GaussianMap, Pose, CameraIntrinsics) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intr = CameraIntrinsics::new(60.0, 60.0, 31.5, 31.5, 64, 64);
    let pose = Pose::new(so3_exp(&random_vec3(&mut rng, -0.3, 0.3)), random_vec3(&mut rng, -0.2, 0.2));
    let inv = pose.inverse();
    let mut map = GaussianMap::new(feature_dim);
    let gs = (0..n)
        .map(|_| {
            let cam = Vector3::new(
                rng.random_range(-0.8..0.8),
                rng.random_range(-0.8..0.8),
                rng.random_range(1.5..3.0),
            );
            Gaussian {
                position: inv.transform(&cam),
                rotation: random_quat(&mut rng),
                log_scale: random_vec3(&mut rng, -3.5, -1.5),
                opacity_logit: rng.random_range(-2.0..4.0),
                color: random_vec3(&mut rng, 0.0, 1.0),
                feature: (0..feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            }
        })
        .collect();
    map.append_gaussians(gs).unwrap();
    (map, pose, intr)
}
