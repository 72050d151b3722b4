use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::SyntheticSceneSpec;
use crate::error::{Error, Result};
use crate::mapper::MappingConfig;
use crate::optimizer::LearningRates;
use crate::rasterizer::CameraIntrinsics;
use crate::semantics::{SemanticConfig, SemanticMode};
use crate::tracker::TrackingConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Tum,
    Replica,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Sequence root for on-disk datasets.
    pub path: Option<PathBuf>,
    /// Overrides any intrinsics found next to the sequence.
    pub intrinsics: Option<CameraIntrinsics>,
    pub synthetic: SyntheticSceneSpec,
    /// Fraction of corrupted pixels in synthesized feature priors.
    pub prior_corruption: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            path: None,
            intrinsics: None,
            synthetic: SyntheticSceneSpec::default(),
            prior_corruption: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub feature_dim: usize,
    pub semantics_enabled: bool,
    /// Run tracking and mapping in lockstep on one thread.
    pub single_thread: bool,
    /// Keyframes that may wait for the mapping thread.
    pub queue_capacity: usize,
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub tracking: TrackingConfig,
    pub mapping: MappingConfig,
    pub semantics: SemanticConfig,
    pub learning_rates: LearningRates,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            feature_dim: 128,
            semantics_enabled: true,
            single_thread: true,
            queue_capacity: 4,
            output_dir: None,
            dataset: DatasetConfig::default(),
            tracking: TrackingConfig::default(),
            mapping: MappingConfig::default(),
            semantics: SemanticConfig::default(),
            learning_rates: LearningRates::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML file; relative dataset and output paths resolve against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset.path, &mut cfg.output_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.tracking.validate()?;
        self.mapping.validate()?;
        self.learning_rates.position.validate()?;
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if self.queue_capacity == 0 {
            return Err(Error::Config("queue_capacity must be positive".into()));
        }
        if self.semantics_enabled && self.semantics.mode == SemanticMode::GroundTruth {
            self.semantics.validate(self.feature_dim)?;
        }
        if self.dataset.kind != DatasetKind::Synthetic && self.dataset.path.is_none() {
            return Err(Error::Config("dataset.path is required for on-disk datasets".into()));
        }
        if !(0.0..=1.0).contains(&self.dataset.prior_corruption) {
            return Err(Error::Config("prior_corruption outside [0,1]".into()));
        }
        if let Some(i) = &self.dataset.intrinsics {
            i.validate()?;
        }
        self.dataset.synthetic.validate()
    }
}
