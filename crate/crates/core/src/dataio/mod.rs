//! Dataset ingestion, synthetic sequences and trajectory files.
//!
//! Supported layouts:
//! - TUM RGB-D: `rgb.txt`, `depth.txt`, `groundtruth.txt`, depth PNG scale 5000.
//! - Replica-like: `frameXXXXXX.{jpg,png}`, `depthXXXXXX.png`, optional
//!   `semanticXXXXXX.png`, `traj.txt` (row-major 4x4 camera-to-world) and an
//!   optional `config.toml` sidecar.
//!
//! Poses are stored world-to-camera ([`Pose`]); trajectory files hold the
//! camera-to-world inverse, as the TUM tools expect.

mod prior;
mod replica;
mod synthetic;
mod trajectory;
mod tum;

use std::path::PathBuf;

pub use prior::{load_prior_features, synthesize_textual_priors, PriorSynthesis};
pub use replica::{load_replica_like, write_replica_like, ReplicaSidecar, DEFAULT_REPLICA_DEPTH_SCALE};
pub use synthetic::{generate_synthetic, SyntheticScene, SyntheticSceneSpec, TrajectoryKind};
pub use trajectory::{
    export_keyframes, export_trajectory, format_trajectory, parse_trajectory, read_trajectory,
    TrajectoryEntry,
};
pub use tum::{load_tum_sequence, write_tum_like, TumSequence, TUM_ASSOCIATION_TOLERANCE, TUM_DEPTH_SCALE};

use crate::image::{Image, LabelMap};
use crate::rasterizer::Pose;

/// One RGB-D observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub frame_id: usize,
    /// Seconds.
    pub timestamp: f64,
    /// `H x W x 3` in `[0, 1]`.
    pub rgb: Image,
    /// `H x W` meters, `0` = invalid.
    pub depth: Image,
    pub gt_label: Option<LabelMap>,
    pub prior_feature_path: Option<PathBuf>,
    /// World-to-camera.
    pub gt_pose: Option<Pose>,
}

impl Frame {
    pub fn width(&self) -> usize {
        self.rgb.width()
    }

    pub fn height(&self) -> usize {
        self.rgb.height()
    }

    pub fn has_valid_depth(&self) -> bool {
        self.depth.data().iter().any(|&d| d > 0.0)
    }
}
