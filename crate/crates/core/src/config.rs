//! TOML run configuration: a `[corpus]` table for the generator and an
//! `[experiment]` table for the protocol. Missing keys take their defaults;
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::GeneratorConfig;
use crate::error::{Error, Result};
use crate::experiment::{ExperimentConfig, SplitMode};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub corpus: GeneratorConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    /// 64×64 corpus with 40 images per class per round and the matching
    /// short training schedule for `mode`.
    pub fn fast_profile(mode: SplitMode) -> Self {
        RunConfig {
            corpus: GeneratorConfig::fast_profile(),
            experiment: ExperimentConfig::fast_profile(mode),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        RunConfig::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.experiment.validate()
    }
}
