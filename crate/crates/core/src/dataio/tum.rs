use std::fs;
use std::path::Path;

use log::warn;

use super::trajectory::{format_trajectory, parse_trajectory, TrajectoryEntry};
use super::Frame;
use crate::error::{Error, Result};
use crate::image::{read_depth_png, read_rgb, write_depth_png, write_rgb_png};
use crate::rasterizer::CameraIntrinsics;

/// Raw depth units per meter.
pub const TUM_DEPTH_SCALE: f64 = 5000.0;
/// Maximum timestamp gap when associating streams, seconds.
pub const TUM_ASSOCIATION_TOLERANCE: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct TumSequence {
    pub frames: Vec<Frame>,
    /// Full ground-truth trajectory as listed in `groundtruth.txt`.
    pub groundtruth: Vec<TrajectoryEntry>,
    /// Color frames without a depth and ground-truth match.
    pub dropped: usize,
    /// From an optional `camera.toml` next to the lists.
    pub intrinsics: Option<CameraIntrinsics>,
}

fn read_list(path: &Path) -> Result<Vec<(f64, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(ts), Some(file)) = (it.next(), it.next()) else {
            return Err(Error::Format(format!("{}:{}: expected `timestamp file`", path.display(), i + 1)));
        };
        let ts: f64 = ts
            .parse()
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push((ts, file.to_string()));
    }
    Ok(out)
}

/// Index of the entry nearest to `t` within the tolerance. `sorted` must be
/// ascending by timestamp.
fn nearest<T>(sorted: &[T], key: impl Fn(&T) -> f64, t: f64) -> Option<usize> {
    let i = sorted.partition_point(|e| key(e) < t);
    let mut best: Option<(usize, f64)> = None;
    for j in [i.wrapping_sub(1), i] {
        if let Some(e) = sorted.get(j) {
            let d = (key(e) - t).abs();
            if d <= TUM_ASSOCIATION_TOLERANCE && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
    }
    best.map(|(j, _)| j)
}

pub fn load_tum_sequence(root: &Path) -> Result<TumSequence> {
    let rgb = read_list(&root.join("rgb.txt"))?;
    let mut depth = read_list(&root.join("depth.txt"))?;
    let gt_path = root.join("groundtruth.txt");
    let gt_text = fs::read_to_string(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
    let mut groundtruth = parse_trajectory(&gt_text)?;
    depth.sort_by(|a, b| a.0.total_cmp(&b.0));
    groundtruth.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));

    let intrinsics = {
        let p = root.join("camera.toml");
        if p.exists() {
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let intr: CameraIntrinsics =
                toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
            Some(intr)
        } else {
            None
        }
    };

    let mut frames = Vec::new();
    let mut dropped = 0;
    for (ts, file) in &rgb {
        let d = nearest(&depth, |e| e.0, *ts);
        let g = nearest(&groundtruth, |e| e.timestamp, *ts);
        let (Some(d), Some(g)) = (d, g) else {
            dropped += 1;
            continue;
        };
        let color = read_rgb(&root.join(file))?;
        let depth_img = read_depth_png(&root.join(&depth[d].1), TUM_DEPTH_SCALE)?;
        if (color.width(), color.height()) != (depth_img.width(), depth_img.height()) {
            return Err(Error::Format(format!("{file}: color and depth sizes differ")));
        }
        frames.push(Frame {
            frame_id: frames.len(),
            timestamp: *ts,
            rgb: color,
            depth: depth_img,
            gt_label: None,
            prior_feature_path: None,
            gt_pose: Some(groundtruth[g].pose),
        });
    }
    if dropped > 0 {
        warn!("{}: dropped {dropped} color frames without depth/ground-truth match", root.display());
    }
    if frames.is_empty() {
        return Err(Error::Format(format!("{}: no associated frames", root.display())));
    }
    Ok(TumSequence {
        frames,
        groundtruth,
        dropped,
        intrinsics,
    })
}

/// Writes frames in the TUM layout (shared timestamps for all streams).
pub fn write_tum_like(dir: &Path, frames: &[Frame], intrinsics: Option<&CameraIntrinsics>) -> Result<()> {
    for sub in ["rgb", "depth"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut rgb_list = String::from("# color images\n# timestamp filename\n");
    let mut depth_list = String::from("# depth maps\n# timestamp filename\n");
    let mut gt = Vec::new();
    for f in frames {
        let name = format!("{:.6}.png", f.timestamp);
        write_rgb_png(&f.rgb, &dir.join("rgb").join(&name))?;
        write_depth_png(&f.depth, &dir.join("depth").join(&name), TUM_DEPTH_SCALE)?;
        rgb_list.push_str(&format!("{:.6} rgb/{name}\n", f.timestamp));
        depth_list.push_str(&format!("{:.6} depth/{name}\n", f.timestamp));
        if let Some(p) = f.gt_pose {
            gt.push(TrajectoryEntry {
                timestamp: f.timestamp,
                pose: p,
            });
        }
    }
    let write = |name: &str, s: String| {
        let p = dir.join(name);
        fs::write(&p, s).map_err(|e| Error::io(&p, e))
    };
    write("rgb.txt", rgb_list)?;
    write("depth.txt", depth_list)?;
    write("groundtruth.txt", format!("# timestamp tx ty tz qx qy qz qw\n{}", format_trajectory(&gt)))?;
    if let Some(intr) = intrinsics {
        write("camera.toml", toml::to_string(intr).map_err(|e| Error::Format(e.to_string()))?)?;
    }
    Ok(())
}
