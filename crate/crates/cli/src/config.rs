use std::path::{Path, PathBuf};

use anyhow::Context;
use reroof::data::{SplitName, SynthConfig};
use reroof::impact::ImpactParams;
use reroof::pairclf::ClassifierTrainConfig;
use reroof::vae::VaeTrainConfig;
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

/// Everything a command needs. Loaded from TOML, then overridden by flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for per-building and per-batch parallel stages.
    /// Results do not depend on this value.
    pub workers: usize,
    /// Dataset root.
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    /// Split that `infer`, `baseline` and `eval` operate on.
    pub split: SplitName,
    pub synth: SynthConfig,
    pub vae: VaeTrainConfig,
    pub classifier: ClassifierTrainConfig,
    pub impact: ImpactParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 1,
            data: None,
            out: PathBuf::from("out"),
            split: SplitName::Test,
            synth: SynthConfig::default(),
            vae: VaeTrainConfig::default(),
            classifier: ClassifierTrainConfig::default(),
            impact: ImpactParams::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn data_root(&self) -> anyhow::Result<&Path> {
        self.data
            .as_deref()
            .context("no dataset root; pass --data or set `data` in the config")
    }

    /// Creates the output directory and records this config in it.
    pub fn write_resolved(&self) -> anyhow::Result<()> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.out.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = RunConfig::from_toml("seed = 9\n[vae]\nepochs = 3\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.vae.epochs, 3);
        assert_eq!(c.vae.batch_size, 32);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sede = 9\n").is_err());
    }
}
