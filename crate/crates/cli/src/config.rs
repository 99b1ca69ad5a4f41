use std::path::Path;
use std::time::Duration;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use streetsplat::guidance::wire::DEFAULT_TIMEOUT;
use streetsplat::scene_io::{DatasetManifest, SplitScheme};
use streetsplat::trainer::TrainConfig;

/// Overrides the split stored with the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub drop_rate: f64,
    pub scheme: SplitScheme,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    /// `identity`, `toy`, `oracle` or `remote:HOST:PORT`.
    pub provider: String,
    pub timeout_secs: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { provider: "toy".into(), timeout_secs: DEFAULT_TIMEOUT.as_secs_f64() }
    }
}

impl GuidanceConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs.max(0.001))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub split: Option<SplitConfig>,
    pub guidance: GuidanceConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            }
            None => Ok(Self::default()),
        }
    }

    pub fn apply_split(&self, manifest: &mut DatasetManifest) -> Result<()> {
        if let Some(s) = self.split {
            manifest.resplit(s.drop_rate, s.scheme)?;
        }
        Ok(())
    }
}
