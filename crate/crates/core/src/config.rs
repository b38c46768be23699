//! Run configuration: one TOML file with `model`, `train`, `data` and `eval`
//! sections plus a root seed. Three presets ship with the crate.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Protocol;
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::training::TrainConfig;

pub const PRESETS: [(&str, &str); 3] = [
    ("base-paper", include_str!("../../../configs/base-paper.toml")),
    ("large-paper", include_str!("../../../configs/large-paper.toml")),
    ("desk-tiny", include_str!("../../../configs/desk-tiny.toml")),
];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Training corpus (JSON-lines or long CSV).
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
}

fn default_protocol() -> Protocol {
    Protocol::LastWindow
}
fn default_eval_horizon() -> usize {
    64
}
fn default_horizons() -> Vec<usize> {
    vec![96, 192, 336, 720]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_protocol")]
    pub protocol: Protocol,
    /// Dataset files; each file is one dataset named after its stem.
    #[serde(default)]
    pub datasets: Vec<PathBuf>,
    /// Last-window horizon.
    #[serde(default = "default_eval_horizon")]
    pub horizon: usize,
    /// Rolling horizons.
    #[serde(default = "default_horizons")]
    pub horizons: Vec<usize>,
    #[serde(default)]
    pub stride: Option<usize>,
    /// Seasonal period overrides by dataset name.
    #[serde(default)]
    pub periods: BTreeMap<String, usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            protocol: default_protocol(),
            datasets: Vec::new(),
            horizon: default_eval_horizon(),
            horizons: default_horizons(),
            stride: None,
            periods: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset(name: &str) -> Option<Result<Self>> {
        PRESETS.iter().find(|(n, _)| *n == name).map(|(_, text)| Self::from_toml(text))
    }

    /// Loads a file, or a preset when `spec` names one and no such file exists.
    pub fn load(spec: &str) -> Result<Self> {
        let path = Path::new(spec);
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            return Self::from_toml(&text);
        }
        Self::preset(spec).unwrap_or_else(|| {
            Err(Error::Config(format!(
                "'{spec}' is neither a readable file nor a preset ({})",
                PRESETS.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
            )))
        })
    }

    /// Cross-field checks that must pass before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(&self.model)?;
        if let Some(s) = &self.data.synth {
            s.validate()?;
        }
        if self.eval.horizon == 0 || self.eval.horizons.contains(&0) || self.eval.stride == Some(0) {
            return Err(Error::Config("evaluation horizons and stride must be positive".into()));
        }
        Ok(())
    }

    /// Every referenced input file must exist.
    pub fn check_paths(&self) -> Result<()> {
        let missing = self
            .data
            .corpus
            .iter()
            .chain(&self.eval.datasets)
            .find(|p| !p.exists());
        match missing {
            Some(p) => Err(Error::Config(format!("referenced path does not exist: {}", p.display()))),
            None => Ok(()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        for (name, _) in PRESETS {
            let cfg = RunConfig::preset(name).unwrap().unwrap();
            assert_eq!(cfg.model.patch_sizes, vec![16, 32], "{name}");
        }
        let tiny = RunConfig::preset("desk-tiny").unwrap().unwrap();
        assert_eq!(tiny.model.d_model, 128);
        assert_eq!(tiny.train.steps, 5000);
        assert!(RunConfig::preset("nope").is_none());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::preset("desk-tiny").unwrap().unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn divisibility_checked_up_front() {
        let mut cfg = RunConfig::preset("desk-tiny").unwrap().unwrap();
        cfg.train.horizon = 50;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::preset("desk-tiny").unwrap().unwrap();
        cfg.model.context_len = 250;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = "[model]\npatch_sizes=[2]\noutput_patch=2\ncontext_len=4\nd_model=4\nenc_layers=1\ndec_layers=1\nheads=1\nd_ff=4\nbogus=1\n";
        assert!(RunConfig::from_toml(text).is_err());
    }
}
