//! EWA projection of a 3D Gaussian to a 2D image-space Gaussian, and the
//! chain rule back from image-space quantities to Gaussian and pose
//! parameters.
//!
//! Forward:
//!   μc = W μ + t
//!   Σ  = R S Sᵀ Rᵀ
//!   Σc = W Σ Wᵀ
//!   C  = J Σc Jᵀ + ε I        (ε = low-pass floor)
//!   A  = C⁻¹                  (conic)
//!
//! Gradients are accumulated with every matrix entry treated as an
//! independent variable, so all the transposition rules below hold for
//! full (not packed-symmetric) matrices.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector6};

use super::camera::{CameraIntrinsics, Pose};
use crate::scene::{normalize_quat, quat_to_matrix, Gaussian, Quat};

/// Added to the diagonal of every 2D covariance, pixels².
pub const LOW_PASS_FLOOR: f64 = 0.3;
/// Projected covariances with a smaller determinant are not rendered.
pub const MIN_COV2D_DET: f64 = 1e-12;
/// Frustum test margin, in standard deviations.
const FRUSTUM_SIGMAS: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected2D {
    pub mean2d: Vector2<f64>,
    /// Includes the low-pass floor.
    pub cov2d: Matrix2<f64>,
    /// Camera-frame z of the mean.
    pub depth: f64,
    pub cam_mean: Vector3<f64>,
    pub in_frustum: bool,
}

/// Forward intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct ProjectionCache {
    pub quat: Quat,
    pub quat_norm: f64,
    pub rot: Matrix3<f64>,
    pub scale: Vector3<f64>,
    pub m: Matrix3<f64>,
    pub sigma: Matrix3<f64>,
    pub cam_mean: Vector3<f64>,
    pub jac: Matrix2x3<f64>,
    pub sigma_cam: Matrix3<f64>,
    pub cov2d: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub mean2d: Vector2<f64>,
    pub in_frustum: bool,
    pub degenerate: bool,
}

pub(crate) fn project_cached(g: &Gaussian, pose: &Pose, intr: &CameraIntrinsics) -> ProjectionCache {
    let q = g.rotation;
    let quat_norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let quat = normalize_quat(&q);
    let rot = quat_to_matrix(&quat);
    let scale = g.log_scale.map(f64::exp);
    let m = rot * Matrix3::from_diagonal(&scale);
    let sigma = m * m.transpose();

    let w = &pose.rotation;
    let cam_mean = w * g.position + pose.translation;
    let (x, y, z) = (cam_mean.x, cam_mean.y, cam_mean.z);
    let (fx, fy) = (intr.fx, intr.fy);
    let jac = Matrix2x3::new(
        fx / z,
        0.0,
        -fx * x / (z * z),
        0.0,
        fy / z,
        -fy * y / (z * z),
    );
    let sigma_cam = w * sigma * w.transpose();
    let cov2d = jac * sigma_cam * jac.transpose() + Matrix2::identity() * LOW_PASS_FLOOR;
    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
    let degenerate = !(det > MIN_COV2D_DET) || !det.is_finite();
    let conic = if degenerate {
        Matrix2::zeros()
    } else {
        Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det
    };
    let mean2d = Vector2::new(fx * x / z + intr.cx, fy * y / z + intr.cy);

    let mut in_frustum = z > intr.z_near && z < intr.z_far && mean2d.iter().all(|v| v.is_finite());
    if in_frustum {
        let sx = FRUSTUM_SIGMAS * cov2d[(0, 0)].max(0.0).sqrt();
        let sy = FRUSTUM_SIGMAS * cov2d[(1, 1)].max(0.0).sqrt();
        let (w_max, h_max) = ((intr.width - 1) as f64, (intr.height - 1) as f64);
        in_frustum = mean2d.x >= -sx
            && mean2d.x <= w_max + sx
            && mean2d.y >= -sy
            && mean2d.y <= h_max + sy;
    }

    ProjectionCache {
        quat,
        quat_norm,
        rot,
        scale,
        m,
        sigma,
        cam_mean,
        jac,
        sigma_cam,
        cov2d,
        conic,
        mean2d,
        in_frustum,
        degenerate,
    }
}

/// Projects one Gaussian into the image.
pub fn project(g: &Gaussian, pose: &Pose, intr: &CameraIntrinsics) -> Projected2D {
    let c = project_cached(g, pose, intr);
    Projected2D {
        mean2d: c.mean2d,
        cov2d: c.cov2d,
        depth: c.cam_mean.z,
        cam_mean: c.cam_mean,
        in_frustum: c.in_frustum,
    }
}

/// Upstream gradients of one Gaussian's image-space quantities.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Splat2DGrad {
    pub mean2d: Vector2<f64>,
    /// dL/dA with A the conic (full 2x2).
    pub conic: Matrix2<f64>,
    pub depth: f64,
}

/// Gradients of geometry parameters for one Gaussian.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct GeometryGrad {
    pub position: Vector3<f64>,
    /// With respect to the stored (pre-normalization) quaternion.
    pub rotation: [f64; 4],
    pub log_scale: Vector3<f64>,
    /// Left-perturbation pose gradient `(translation, rotation)`.
    pub pose: Vector6<f64>,
}

pub(crate) fn project_backward(
    cache: &ProjectionCache,
    pose: &Pose,
    intr: &CameraIntrinsics,
    up: &Splat2DGrad,
) -> GeometryGrad {
    let a = &cache.conic;
    let w = &pose.rotation;
    let (x, y, z) = (cache.cam_mean.x, cache.cam_mean.y, cache.cam_mean.z);
    let (fx, fy) = (intr.fx, intr.fy);
    let (z2, z3) = (z * z, z * z * z);

    // A = C⁻¹  =>  dL/dC = -Aᵀ G_A Aᵀ
    let g_cov2d = -(a.transpose() * up.conic * a.transpose());
    // C = J Σc Jᵀ
    let g_sigma_cam = cache.jac.transpose() * g_cov2d * cache.jac;
    let g_jac = g_cov2d * cache.jac * cache.sigma_cam.transpose()
        + g_cov2d.transpose() * cache.jac * cache.sigma_cam;

    let mut g_cam = Vector3::zeros();
    // J(μc)
    g_cam.x += g_jac[(0, 2)] * (-fx / z2);
    g_cam.y += g_jac[(1, 2)] * (-fy / z2);
    g_cam.z += g_jac[(0, 0)] * (-fx / z2)
        + g_jac[(0, 2)] * (2.0 * fx * x / z3)
        + g_jac[(1, 1)] * (-fy / z2)
        + g_jac[(1, 2)] * (2.0 * fy * y / z3);
    // mean2d(μc)
    g_cam.x += up.mean2d.x * fx / z;
    g_cam.y += up.mean2d.y * fy / z;
    g_cam.z += -up.mean2d.x * fx * x / z2 - up.mean2d.y * fy * y / z2;
    // depth = μc.z
    g_cam.z += up.depth;

    // Σc = W Σ Wᵀ
    let g_sigma = w.transpose() * g_sigma_cam * w;
    let g_w_cov = g_sigma_cam * w * cache.sigma.transpose() + g_sigma_cam.transpose() * w * cache.sigma;

    // Σ = M Mᵀ,  M = R S
    let g_m = (g_sigma + g_sigma.transpose()) * cache.m;
    let mut g_rot = Matrix3::zeros();
    let mut g_log_scale = Vector3::zeros();
    for k in 0..3 {
        let col = g_m.column(k);
        g_rot.set_column(k, &(col * cache.scale[k]));
        let g_s = col.dot(&cache.rot.column(k));
        g_log_scale[k] = g_s * cache.scale[k];
    }
    let rotation = quat_backward(&cache.quat, cache.quat_norm, &g_rot);

    let position = w.transpose() * g_cam;

    // Pose: dμc/dδ = [I, -μc^×], dW/dδ = [0, -W^×] (left perturbation).
    let rot_from_mean = cache.cam_mean.cross(&g_cam);
    let b = g_w_cov * w.transpose();
    let rot_from_cov = Vector3::new(
        b[(2, 1)] - b[(1, 2)],
        b[(0, 2)] - b[(2, 0)],
        b[(1, 0)] - b[(0, 1)],
    );
    let rot_total = rot_from_mean + rot_from_cov;
    let pose_grad = Vector6::new(
        g_cam.x,
        g_cam.y,
        g_cam.z,
        rot_total.x,
        rot_total.y,
        rot_total.z,
    );

    GeometryGrad {
        position,
        rotation,
        log_scale: g_log_scale,
        pose: pose_grad,
    }
}

/// dL/dq for the stored quaternion given dL/dR of `R(q / |q|)`.
fn quat_backward(qn: &Quat, norm: f64, g_r: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = *qn;
    let g = |r: usize, c: usize| g_r[(r, c)];
    let gw = 2.0
        * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let gx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let gy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let gz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    let gq = [gw, gx, gy, gz];
    if norm == 0.0 {
        return [0.0; 4];
    }
    // q̂ = q/|q|  =>  dL/dq = (I - q̂ q̂ᵀ) dL/dq̂ / |q|
    let dot: f64 = (0..4).map(|i| gq[i] * qn[i]).sum();
    [
        (gq[0] - qn[0] * dot) / norm,
        (gq[1] - qn[1] * dot) / norm,
        (gq[2] - qn[2] * dot) / norm,
        (gq[3] - qn[3] * dot) / norm,
    ]
}
