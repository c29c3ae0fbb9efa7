//! Training configuration, read from TOML. Every key is optional; missing
//! keys take the desk-scale defaults below.
//!
//! ```toml
//! learning_rate = 2e-4
//! batch_size = 2
//! iterations = 2000
//! seed = 0
//! crop_size = 128
//! checkpoint_every = 500
//! corpus = "data/train"      # directory of PNG/JPEG images
//! output_dir = "runs/desk"
//!
//! [mask]
//! coverage_min = 0.1
//! coverage_max = 0.6
//!
//! [model.unet]
//! base_width = 16
//!
//! [model.extractor]
//! width_divisor = 4
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::loss::PerceptualLossSpec;
use super::TrainError;
use crate::colorizer::{ModelConfig, DOWNSAMPLE_FACTOR};
use crate::simulation::MaskConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Fixes crop positions, donor choice, mask sampling and initialisation.
    pub seed: u64,
    pub crop_size: usize,
    pub checkpoint_every: usize,
    pub corpus: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub mask: MaskConfig,
    pub model: ModelConfig,
    pub loss: PerceptualLossSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            batch_size: 2,
            iterations: 2000,
            seed: 0,
            crop_size: 128,
            checkpoint_every: 500,
            corpus: None,
            output_dir: None,
            mask: MaskConfig::default(),
            model: ModelConfig::desk(),
            loss: PerceptualLossSpec::default(),
        }
    }
}

impl TrainConfig {
    /// Batch 8, 256 crops, full-width networks.
    pub fn full_scale() -> Self {
        TrainConfig { batch_size: 8, crop_size: 256, model: ModelConfig::default(), ..Self::default() }
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive".into());
        }
        if self.crop_size == 0 || self.crop_size % DOWNSAMPLE_FACTOR as usize != 0 {
            return bad(format!("crop_size must be a positive multiple of {DOWNSAMPLE_FACTOR}, got {}", self.crop_size));
        }
        let m = &self.mask;
        if !(0.0..=1.0).contains(&m.coverage_min) || m.coverage_min > m.coverage_max || m.coverage_max > 1.0 {
            return bad(format!("mask coverage range [{}, {}] is invalid", m.coverage_min, m.coverage_max));
        }
        if m.regions_min == 0 || m.regions_min > m.regions_max {
            return bad(format!("mask region range [{}, {}] is invalid", m.regions_min, m.regions_max));
        }
        self.loss.validate().map_err(|e| TrainError::Config(e.to_string()))
    }
}
