//! Run configuration: one JSON document covering data, training and CRF settings.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crf::CrfSettings;
use crate::dataset::DEFAULT_TRAIN_FRACTION;
use crate::error::{Error, Result};
use crate::fcn::{FcnConfig, IMAGE_SIZE};
use crate::synth::GenSpec;
use crate::train::AdvConfig;

/// Augmentation multiplies the training set by this factor.
pub const AUGMENTATION_FACTOR: usize = 4;

/// File name of the resolved configuration written next to every artifact.
pub const RESOLVED_CONFIG: &str = "config.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Everything a command needs. Unknown keys are rejected; absent keys take
/// their defaults. `seed` overrides the seeds inside `data` and `training`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: GenSpec,
    /// Fraction of samples (leading indices) assigned to the training split.
    pub train_fraction: f64,
    pub augment: bool,
    pub training: AdvConfig,
    pub crf: CrfSettings,
    /// Sub-net architectures; `None` means the four published presets.
    pub architectures: Option<Vec<FcnConfig>>,
    /// Score train/test splits every this many epochs (0: final epoch only).
    pub eval_every: usize,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: GenSpec::default(),
            train_fraction: DEFAULT_TRAIN_FRACTION,
            augment: true,
            training: AdvConfig::default(),
            crf: CrfSettings::default(),
            architectures: None,
            eval_every: 1,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Contract(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Contract(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Propagates the top-level seed and validates every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.data.seed = self.seed;
        self.training.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.training.validate()?;
        self.crf.validate()?;
        crate::dataset::train_count(self.data.count, self.train_fraction)?;
        if let Some(archs) = &self.architectures {
            if archs.is_empty() {
                return Err(Error::Contract("architectures list is empty".into()));
            }
            for a in archs {
                a.validate()?;
            }
        }
        Ok(())
    }

    /// Sub-net architectures in effect.
    pub fn fcn_configs(&self) -> Vec<FcnConfig> {
        self.architectures.clone().unwrap_or_else(|| FcnConfig::presets().to_vec())
    }

    /// Input side length the configured architectures expect.
    pub fn image_size(&self) -> usize {
        self.architectures.as_ref().map_or(IMAGE_SIZE, |a| a[0].image_size)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(RESOLVED_CONFIG), self.to_json()?)?;
        Ok(())
    }
}
