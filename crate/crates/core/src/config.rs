//! The TOML run configuration shared by all subcommands.
//!
//! Every section is optional; missing keys take their defaults. A single master `seed`
//! drives every random stream. Command-line flags override the file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::{ShapConfig, TemporalConfig};
use crate::frame::PreprocessConfig;
use crate::globals::GlobalFeatureConfig;
use crate::model::ModelConfig;
use crate::synth::GeneratorConfig;
use crate::training::{CvConfig, SearchGrid, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub preprocess: PreprocessConfig,
    pub globals: GlobalFeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub grid: SearchGrid,
    pub cv: CvConfig,
    pub shap: ShapConfig,
    pub temporal: TemporalConfig,
    pub synth: GeneratorConfig,
}

/// Independent per-purpose seed derived from a master seed (SplitMix64 finalizer),
/// kept below 2^63 so it survives a TOML round trip.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31)) >> 1
}

const STREAM_TRAIN: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_SHAP: u64 = 3;
const STREAM_SYNTH: u64 = 4;

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets the master seed and every derived seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = derive_seed(seed, STREAM_TRAIN);
        self.cv.seed = derive_seed(seed, STREAM_SPLIT);
        self.shap.seed = derive_seed(seed, STREAM_SHAP);
        self.synth.seed = derive_seed(seed, STREAM_SYNTH);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.model.backbone.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.grid.points().is_empty() {
            return Err(Error::Config("search grid is empty".into()));
        }
        if self.shap.n_samples == 0 {
            return Err(Error::Config("shap.n_samples must be at least 1".into()));
        }
        Ok(())
    }
}
