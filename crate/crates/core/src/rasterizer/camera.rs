//! Pinhole intrinsics and world-to-camera poses.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{matrix_to_quat, quat_to_matrix, Quat};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_z_near")]
    pub z_near: f64,
    #[serde(default = "default_z_far")]
    pub z_far: f64,
}

fn default_z_near() -> f64 {
    0.01
}

fn default_z_far() -> f64 {
    100.0
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            z_near: default_z_near(),
            z_far: default_z_far(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.z_near > 0.0 && self.z_near < self.z_far) {
            return Err(Error::Config(format!(
                "need 0 < z_near < z_far (got {}, {})",
                self.z_near, self.z_far
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image size must be non-zero".into()));
        }
        Ok(())
    }

    /// Camera-frame point of pixel `(u, v)` at depth `z`.
    pub fn back_project(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }
}

/// World-to-camera rigid transform `T_CW`: `x_c = R x_w + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    #[inline]
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`, i.e. apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Pose {
        Pose {
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn quaternion(&self) -> Quat {
        matrix_to_quat(&self.rotation)
    }

    pub fn from_quaternion(q: &Quat, translation: Vector3<f64>) -> Pose {
        Pose {
            rotation: quat_to_matrix(&crate::scene::normalize_quat(q)),
            translation,
        }
    }

    /// Camera looking from `eye` toward `target`, image y pointing along
    /// `-up` (x right, y down, z forward).
    pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Pose {
        let z = (target - eye).normalize();
        let x = z.cross(up).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Pose {
            rotation,
            translation: -(rotation * eye),
        }
    }
}

#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// SO(3) exponential (Rodrigues).
pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let k = skew(omega);
    let (a, b) = if theta2 < 1e-12 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// SE(3) exponential of `(rho, omega)` as `(R, t)`.
pub fn se3_exp(delta: &Vector6<f64>) -> Pose {
    let rho = Vector3::new(delta[0], delta[1], delta[2]);
    let omega = Vector3::new(delta[3], delta[4], delta[5]);
    let theta2 = omega.norm_squared();
    let k = skew(&omega);
    let (b, c) = if theta2 < 1e-12 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    let v = Matrix3::identity() + k * b + k * k * c;
    Pose {
        rotation: so3_exp(&omega),
        translation: v * rho,
    }
}

/// Gram-Schmidt on the rows; keeps `det = +1`.
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let x = r.row(0).transpose().normalize();
    let y0 = r.row(1).transpose();
    let y = (y0 - x * x.dot(&y0)).normalize();
    let z = x.cross(&y);
    Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])
}

/// Left-multiplied update `exp(delta^) · pose`; `delta = (translation, rotation)`.
pub fn apply_pose_delta(pose: &Pose, delta: &Vector6<f64>) -> Pose {
    if delta.iter().all(|&d| d == 0.0) {
        return *pose;
    }
    let d = se3_exp(delta);
    let out = d.compose(pose);
    Pose {
        rotation: orthonormalize(&out.rotation),
        translation: out.translation,
    }
}
