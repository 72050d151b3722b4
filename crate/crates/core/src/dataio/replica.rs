use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use super::Frame;
use crate::error::{Error, Result};
use crate::image::{read_depth_png, read_label_png, read_rgb, write_depth_png, write_label_png, write_rgb_png};
use crate::rasterizer::{CameraIntrinsics, Pose};

pub const DEFAULT_REPLICA_DEPTH_SCALE: f64 = 6553.5;

/// Optional `config.toml` next to the frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicaSidecar {
    #[serde(default = "default_scale")]
    pub depth_scale: f64,
    #[serde(default)]
    pub camera: Option<CameraIntrinsics>,
}

fn default_scale() -> f64 {
    DEFAULT_REPLICA_DEPTH_SCALE
}

impl Default for ReplicaSidecar {
    fn default() -> Self {
        Self {
            depth_scale: DEFAULT_REPLICA_DEPTH_SCALE,
            camera: None,
        }
    }
}

/// Files named `<prefix><digits>.<ext>` keyed by index.
fn numbered(root: &Path, prefix: &str, exts: &[&str]) -> Result<BTreeMap<usize, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some((stem, ext)) = name.rsplit_once('.') else { continue };
        if !exts.contains(&ext.to_ascii_lowercase().as_str()) {
            continue;
        }
        let Some(digits) = stem.strip_prefix(prefix) else { continue };
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            continue;
        }
        let idx: usize = digits.parse().map_err(|_| Error::Format(format!("bad index in {name}")))?;
        if out.insert(idx, entry.path()).is_some() {
            return Err(Error::Format(format!("duplicate {prefix} index {idx}")));
        }
    }
    Ok(out)
}

fn parse_traj(path: &Path) -> Result<Vec<Pose>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if v.len() != 16 {
            return Err(Error::Format(format!(
                "{}:{}: expected 16 values, found {}",
                path.display(),
                i + 1,
                v.len()
            )));
        }
        let c2w = Pose::from_matrix(&Matrix4::from_row_slice(&v));
        poses.push(c2w.inverse());
    }
    Ok(poses)
}

/// Loads a Replica-style directory. Returns the frames and the sidecar.
pub fn load_replica_like(root: &Path) -> Result<(Vec<Frame>, ReplicaSidecar)> {
    let cfg_path = root.join("config.toml");
    let sidecar = if cfg_path.exists() {
        let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", cfg_path.display())))?
    } else {
        ReplicaSidecar::default()
    };
    let colors = numbered(root, "frame", &["jpg", "jpeg", "png"])?;
    let depths = numbered(root, "depth", &["png"])?;
    let semantics = numbered(root, "semantic", &["png"])?;
    let poses = parse_traj(&root.join("traj.txt"))?;
    if colors.len() != depths.len() || colors.len() != poses.len() {
        return Err(Error::Format(format!(
            "{}: {} color, {} depth, {} poses",
            root.display(),
            colors.len(),
            depths.len(),
            poses.len()
        )));
    }
    if !semantics.is_empty() && semantics.len() != colors.len() {
        return Err(Error::Format(format!(
            "{}: {} semantic maps for {} frames",
            root.display(),
            semantics.len(),
            colors.len()
        )));
    }
    let mut frames = Vec::with_capacity(colors.len());
    for (k, ((ci, cpath), (di, dpath))) in colors.iter().zip(&depths).enumerate() {
        if ci != di {
            return Err(Error::Format(format!("color index {ci} paired with depth index {di}")));
        }
        let rgb = read_rgb(cpath)?;
        let depth = read_depth_png(dpath, sidecar.depth_scale)?;
        if (rgb.width(), rgb.height()) != (depth.width(), depth.height()) {
            return Err(Error::Format(format!("{}: color and depth sizes differ", cpath.display())));
        }
        let gt_label = match semantics.get(ci) {
            Some(p) => Some(read_label_png(p)?),
            None if semantics.is_empty() => None,
            None => return Err(Error::Format(format!("no semantic map for frame {ci}"))),
        };
        frames.push(Frame {
            frame_id: k,
            timestamp: k as f64,
            rgb,
            depth,
            gt_label,
            prior_feature_path: None,
            gt_pose: Some(poses[k]),
        });
    }
    Ok((frames, sidecar))
}

/// Writes frames in the Replica-like layout (PNG color).
pub fn write_replica_like(dir: &Path, frames: &[Frame], sidecar: &ReplicaSidecar) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut traj = String::new();
    for (k, f) in frames.iter().enumerate() {
        write_rgb_png(&f.rgb, &dir.join(format!("frame{k:06}.png")))?;
        write_depth_png(&f.depth, &dir.join(format!("depth{k:06}.png")), sidecar.depth_scale)?;
        if let Some(l) = &f.gt_label {
            write_label_png(l, &dir.join(format!("semantic{k:06}.png")))?;
        }
        let m = f.gt_pose.unwrap_or_default().inverse().to_matrix();
        let row: Vec<String> = m.transpose().iter().map(|v| format!("{v:e}")).collect();
        traj.push_str(&row.join(" "));
        traj.push('\n');
    }
    let tp = dir.join("traj.txt");
    fs::write(&tp, traj).map_err(|e| Error::io(&tp, e))?;
    let cp = dir.join("config.toml");
    let text = toml::to_string(sidecar).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&cp, text).map_err(|e| Error::io(&cp, e))
}
