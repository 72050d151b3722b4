use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::rasterizer::Pose;
use crate::textfmt::format_g;

/// Timestamped world-to-camera pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryEntry {
    pub timestamp: f64,
    pub pose: Pose,
}

fn pose_fields(pose: &Pose) -> String {
    let c2w = pose.inverse();
    let [qw, qx, qy, qz] = c2w.quaternion();
    let t = c2w.translation;
    [t.x, t.y, t.z, qx, qy, qz, qw]
        .iter()
        .map(|&v| format_g(v, 9))
        .collect::<Vec<_>>()
        .join(" ")
}

/// `timestamp tx ty tz qx qy qz qw` per line, camera-to-world.
pub fn format_trajectory(entries: &[TrajectoryEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        s.push_str(&format!("{} {}\n", e.timestamp, pose_fields(&e.pose)));
    }
    s
}

pub fn export_trajectory(entries: &[TrajectoryEntry], path: &Path) -> Result<()> {
    fs::write(path, format_trajectory(entries)).map_err(|e| Error::io(path, e))
}

/// `frame_id tx ty tz qx qy qz qw` per keyframe.
pub fn export_keyframes(keyframes: &[(usize, Pose)], path: &Path) -> Result<()> {
    let mut s = String::new();
    for (id, pose) in keyframes {
        s.push_str(&format!("{id} {}\n", pose_fields(pose)));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Parses TUM-format lines; `#` comments and blank lines are skipped.
pub fn parse_trajectory(text: &str) -> Result<Vec<TrajectoryEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("trajectory line {}: {e}", lineno + 1)))?;
        if v.len() != 8 {
            return Err(Error::Format(format!(
                "trajectory line {}: expected 8 fields, found {}",
                lineno + 1,
                v.len()
            )));
        }
        let c2w = Pose::from_quaternion(&[v[7], v[4], v[5], v[6]], Vector3::new(v[1], v[2], v[3]));
        out.push(TrajectoryEntry {
            timestamp: v[0],
            pose: c2w.inverse(),
        });
    }
    Ok(out)
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trajectory(&text)
}
