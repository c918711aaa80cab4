//! TOML run configuration.
//!
//! A file picks a `preset` (`"desk"` or `"default"`) and overrides any subset
//! of its fields; tables are merged key by key.
//!
//! ```toml
//! preset = "desk"
//! seed = 7
//!
//! [model]
//! image_channels = 1
//!
//! [train]
//! iterations = 200
//!
//! [noise]
//! sigma = 25.0
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use stbn_core::model::StbnConfig;
use stbn_core::train::TrainConfig;
use stbn_core::videodata::NoiseModel;

use crate::error::{io_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    Default,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSettings {
    /// Standard deviation on the 0-255 scale. Absent means unknown noise.
    pub sigma: Option<f64>,
    pub seed: u64,
}

impl Default for NoiseSettings {
    fn default() -> Self {
        Self {
            sigma: Some(25.0),
            seed: 0,
        }
    }
}

impl NoiseSettings {
    pub fn model(&self) -> Result<NoiseModel> {
        match self.sigma {
            Some(s) => Ok(NoiseModel::gaussian(s, self.seed)?),
            None => Ok(NoiseModel::unknown(self.seed)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Model initialisation seed.
    pub seed: u64,
    pub model: StbnConfig,
    pub train: TrainConfig,
    pub noise: NoiseSettings,
    /// Command template for the external flow backend (see [`crate::external`]).
    pub external_flow_command: Option<String>,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (model, train) = match preset {
            Preset::Desk => (StbnConfig::desk(), TrainConfig::desk()),
            Preset::Default => (StbnConfig::default(), TrainConfig::default()),
        };
        Self {
            preset,
            seed: 0,
            model,
            train,
            noise: NoiseSettings::default(),
            external_flow_command: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let preset = match user.get("preset") {
            None => Preset::default(),
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(format!("preset: {e}")))?,
        };
        let mut base = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, user);
        let cfg: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The file at `path`, or the desk preset when none is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::preset(Preset::Desk)),
        }
    }

    /// One seed for initialisation, crop sampling and synthetic noise.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.noise.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.noise.model()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
