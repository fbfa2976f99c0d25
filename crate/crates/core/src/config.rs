//! TOML run configuration: a `[network]` table and a `[train]` table whose
//! keys are the field names of [`NetworkConfig`] and [`TrainConfig`].
//!
//! ```toml
//! [network]
//! base_channels = 16
//! ablation = "full"
//!
//! [train]
//! lr0 = 2e-4
//! epochs = 100
//!
//! [train.weights]
//! beta = 0.1
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::train::TrainConfig;

/// Environment variable that replaces both seeds of a loaded config.
pub const SEED_ENV: &str = "FSID_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path` and applies the seed override from [`SEED_ENV`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config = Self::from_toml(&text)?;
        config.override_seed(std::env::var(SEED_ENV).ok().as_deref())?;
        Ok(config)
    }

    /// Sets both the initialisation and the data seed from `value`, if given.
    pub fn override_seed(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            let seed = v
                .trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
            self.network.seed = seed;
            self.train.seed = seed;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()
    }
}
