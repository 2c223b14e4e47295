//! Run configuration: one TOML document with a master seed and a section
//! per module. Unknown keys are rejected; the merged result is echoed into
//! every output directory as `config.toml`.

use std::fs;
use std::path::Path;

use protomotif::interpret::InterpretConfig;
use protomotif::model::ModelConfig;
use protomotif::synthgen::SynthConfig;
use protomotif::train::TrainConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid override `{0}`: expected section.key=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub enabled: bool,
    pub components: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            components: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synthgen: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub interpret: InterpretConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Applies `section.key=value` overrides. Values are parsed as TOML
    /// literals, falling back to a bare string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<RunConfig, ConfigError> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = toml::Table::try_from(self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            let (path, raw) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.clone()))?;
            let keys: Vec<&str> = path.trim().split('.').collect();
            if keys.iter().any(|k| k.is_empty()) || keys.len() > 2 {
                return Err(ConfigError::Override(o.clone()));
            }
            let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
            let table = match keys.as_slice() {
                [_] => &mut doc,
                [section, _] => doc
                    .get_mut(*section)
                    .and_then(toml::Value::as_table_mut)
                    .ok_or_else(|| ConfigError::Parse(format!("unknown section `{section}`")))?,
                _ => unreachable!(),
            };
            table.insert(keys[keys.len() - 1].to_string(), value);
        }
        RunConfig::from_toml(&toml::to_string(&doc).map_err(|e| ConfigError::Parse(e.to_string()))?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| ConfigError::Invalid(e);
        self.synthgen.validate().map_err(|e| invalid(e.to_string()))?;
        self.model.validate().map_err(|e| invalid(e.to_string()))?;
        self.train.validate().map_err(|e| invalid(e.to_string()))?;
        self.interpret.validate().map_err(|e| invalid(e.to_string()))?;
        if self.model.image_size != self.synthgen.image_size {
            return Err(invalid(format!(
                "model.image_size {} differs from synthgen.image_size {}",
                self.model.image_size, self.synthgen.image_size
            )));
        }
        let channels = if self.preprocess.enabled {
            if self.preprocess.components == 0 || self.preprocess.components > protomotif::synthgen::N_CHANNELS {
                return Err(invalid(format!(
                    "preprocess.components must be in 1..={}",
                    protomotif::synthgen::N_CHANNELS
                )));
            }
            self.preprocess.components
        } else {
            protomotif::synthgen::N_CHANNELS
        };
        if self.model.in_channels != channels {
            return Err(invalid(format!("model.in_channels {} but the input has {channels} channels", self.model.in_channels)));
        }
        if self.model.n_classes != protomotif::synthgen::N_CLASSES {
            return Err(invalid(format!("model.n_classes must be {}", protomotif::synthgen::N_CLASSES)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nepoch = 3\n").is_err());
        assert!(RunConfig::from_toml("[nonsense]\n").is_err());
        assert!(RunConfig::default().with_overrides(&["train.epoch=3".into()]).is_err());
        assert!(RunConfig::default().with_overrides(&["bogus.epochs=3".into()]).is_err());
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::default()
            .with_overrides(&["seed=7".into(), "train.epochs=5".into(), "synthgen.train_fraction=0.5".into()])
            .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.synthgen.train_fraction, 0.5);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn partial_files_take_defaults() {
        let cfg = RunConfig::from_toml("seed = 4\n[model]\nlatent_relu = false\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert!(!cfg.model.latent_relu);
        assert_eq!(cfg.train, TrainConfig::default());
    }
}
