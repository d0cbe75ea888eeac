use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalConfig, EvalError, Result};
use crate::scene::BenchmarkSpec;
use crate::segnet::{SegNetConfig, TrainConfig};

/// Everything a benchmark run needs, as read from one TOML file.
/// Missing tables and keys fall back to their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: BenchmarkSpec,
    pub network: SegNetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| EvalError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            EvalError::Config(msg) => EvalError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is plain data")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.scene.validate()?;
        self.network.validate()?;
        if self.network.num_classes != crate::scene::NUM_CLASSES {
            return Err(EvalError::Config(format!(
                "network has {} classes, the scenes have {}",
                self.network.num_classes,
                crate::scene::NUM_CLASSES
            )));
        }
        self.eval.validate()
    }
}
