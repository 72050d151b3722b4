//! Map representation: Gaussian primitives and visibility bookkeeping.
//!
//! Parameters are stored pre-activation: scales as logs and opacity as a
//! logit, so unconstrained gradient steps always yield valid primitives.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::textfmt::format_g;

pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

pub const MAP_HEADER_TAG: &str = "gsff-map v1";

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// A single scene primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    /// Mean in world coordinates, meters.
    pub position: Vector3<f64>,
    /// Quaternion `(w, x, y, z)`; normalized when used.
    pub rotation: Quat,
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    /// View-independent RGB in `[0, 1]`.
    pub color: Vector3<f64>,
    pub feature: Vec<f64>,
}

impl Gaussian {
    pub fn isotropic(
        position: Vector3<f64>,
        scale: f64,
        opacity: f64,
        color: Vector3<f64>,
        feature_dim: usize,
    ) -> Self {
        let ls = scale.ln();
        Self {
            position,
            rotation: IDENTITY_QUAT,
            log_scale: Vector3::new(ls, ls, ls),
            opacity_logit: logit(opacity),
            color,
            feature: vec![0.0; feature_dim],
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn unit_rotation(&self) -> Quat {
        normalize_quat(&self.rotation)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&self.unit_rotation())
    }

    /// 3D covariance `R S Sᵀ Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        covariance(self)
    }

    pub fn renormalize_rotation(&mut self) {
        self.rotation = normalize_quat(&self.rotation);
    }
}

pub fn normalize_quat(q: &Quat) -> Quat {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n == 0.0 {
        return IDENTITY_QUAT;
    }
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Unit quaternion `(w, x, y, z)` of a rotation matrix (Shepperd's method).
pub fn matrix_to_quat(r: &Matrix3<f64>) -> Quat {
    let tr = r.trace();
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        ]
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        ]
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        [
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    let q = normalize_quat(&q);
    // Canonical hemisphere so exports are stable.
    if q[0] < 0.0 {
        [-q[0], -q[1], -q[2], -q[3]]
    } else {
        q
    }
}

/// Covariance `R S Sᵀ Rᵀ` with `S = diag(exp(log_scale))`.
pub fn covariance(g: &Gaussian) -> Matrix3<f64> {
    let r = g.rotation_matrix();
    let s2 = g.log_scale.map(|l| (2.0 * l).exp());
    let m = r * Matrix3::from_diagonal(&s2) * r.transpose();
    // Exact symmetry.
    (m + m.transpose()) * 0.5
}

/// Per-keyframe set of Gaussians seen with high transmittance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisibilityRecord {
    pub frame_id: usize,
    words: Vec<u64>,
    len: usize,
}

impl VisibilityRecord {
    pub fn new(frame_id: usize, len: usize) -> Self {
        Self {
            frame_id,
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn from_bits(frame_id: usize, bits: &[bool]) -> Self {
        let mut r = Self::new(frame_id, bits.len());
        for (i, &b) in bits.iter().enumerate() {
            if b {
                r.set(i);
            }
        }
        r
    }

    /// Map size at recording time.
    pub fn map_version(&self) -> usize {
        self.len
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        i < self.len && (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize) {
        assert!(i < self.len, "visibility index {i} out of range {}", self.len);
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Packed words; bits past `len` are always zero.
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn to_bits(&self) -> Vec<bool> {
        (0..self.len).map(|i| self.get(i)).collect()
    }

    pub fn union_with(&mut self, other: &VisibilityRecord) {
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= *b;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMap {
    pub gaussians: Vec<Gaussian>,
    feature_dim: usize,
    pub visibility_records: BTreeMap<usize, VisibilityRecord>,
}

impl GaussianMap {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            gaussians: Vec::new(),
            feature_dim,
            visibility_records: BTreeMap::new(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Appends at the end; existing indices and records are untouched.
    pub fn append_gaussians(&mut self, new: Vec<Gaussian>) -> Result<()> {
        if let Some(bad) = new.iter().find(|g| g.feature.len() != self.feature_dim) {
            return Err(Error::dim(format!(
                "gaussian feature length {} != map feature_dim {}",
                bad.feature.len(),
                self.feature_dim
            )));
        }
        self.gaussians.extend(new);
        Ok(())
    }

    pub fn record_visibility(&mut self, record: VisibilityRecord) {
        self.visibility_records.insert(record.frame_id, record);
    }

    /// FNV-1a over every parameter bit pattern, in index order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        eat(self.gaussians.len() as f64);
        for g in &self.gaussians {
            g.position.iter().for_each(|&v| eat(v));
            g.rotation.iter().for_each(|&v| eat(v));
            g.log_scale.iter().for_each(|&v| eat(v));
            eat(g.opacity_logit);
            g.color.iter().for_each(|&v| eat(v));
            g.feature.iter().for_each(|&v| eat(v));
        }
        h
    }

    /// Text export: header line then one line of activated values per
    /// Gaussian, `x y z qw qx qy qz sx sy sz alpha r g b f_0 .. f_{N-1}`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "{MAP_HEADER_TAG} count={} feature_dim={}",
            self.len(),
            self.feature_dim
        )
        .unwrap();
        for g in &self.gaussians {
            let q = g.unit_rotation();
            let sc = g.scale();
            let mut fields: Vec<f64> = Vec::with_capacity(14 + self.feature_dim);
            fields.extend(g.position.iter());
            fields.extend(q.iter());
            fields.extend(sc.iter());
            fields.push(g.opacity());
            fields.extend(g.color.iter());
            fields.extend(g.feature.iter());
            let line: Vec<String> = fields.iter().map(|&v| format_g(v, 9)).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("map file is empty".into()))?;
        let rest = header
            .strip_prefix(MAP_HEADER_TAG)
            .ok_or_else(|| Error::Format(format!("bad map header: {header:?}")))?;
        let mut count = None;
        let mut feature_dim = None;
        for kv in rest.split_whitespace() {
            match kv.split_once('=') {
                Some(("count", v)) => count = v.parse::<usize>().ok(),
                Some(("feature_dim", v)) => feature_dim = v.parse::<usize>().ok(),
                _ => return Err(Error::Format(format!("bad map header field {kv:?}"))),
            }
        }
        let (count, feature_dim) = match (count, feature_dim) {
            (Some(c), Some(n)) => (c, n),
            _ => return Err(Error::Format(format!("incomplete map header: {header:?}"))),
        };
        let mut map = GaussianMap::new(feature_dim);
        for (i, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("map line {}: {e}", i + 2)))?;
            if vals.len() != 14 + feature_dim {
                return Err(Error::Format(format!(
                    "map line {}: {} fields, expected {}",
                    i + 2,
                    vals.len(),
                    14 + feature_dim
                )));
            }
            let alpha = vals[10].clamp(1e-12, 1.0 - 1e-12);
            map.gaussians.push(Gaussian {
                position: Vector3::new(vals[0], vals[1], vals[2]),
                rotation: [vals[3], vals[4], vals[5], vals[6]],
                log_scale: Vector3::new(vals[7].ln(), vals[8].ln(), vals[9].ln()),
                opacity_logit: logit(alpha),
                color: Vector3::new(vals[11], vals[12], vals[13]),
                feature: vals[14..].to_vec(),
            });
        }
        if map.len() != count {
            return Err(Error::Format(format!(
                "map header declares {count} gaussians, found {}",
                map.len()
            )));
        }
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
