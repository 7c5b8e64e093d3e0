//! TOML run configuration. Every section is optional; missing keys take the
//! defaults of the corresponding struct, and command-line flags override
//! whatever the file says.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_io::SyntheticSpec;
use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub synth: SyntheticSpec,
}

impl RunConfig {
    /// Defaults scaled down for the generated dataset: narrow model,
    /// 60 sampled segments, larger step size.
    pub fn synthetic() -> Self {
        let synth = SyntheticSpec::default();
        Self {
            model: ModelConfig {
                num_classes: synth.num_classes,
                feature_dim: synth.feature_dim,
                hidden_dim: 32,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                segments: synth.min_segments,
                learning_rate: 1e-3,
                ..TrainConfig::default()
            },
            inference: InferenceConfig::default(),
            synth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.inference.validate()?;
        self.synth.validate()
    }

    pub fn from_toml(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml(&text).map_err(|e| Error::parse(path, e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}
