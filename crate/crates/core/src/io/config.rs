//! Run configuration: a TOML file with `[model]`, `[train]`, `[infer]`,
//! `[eval]` and `[data]` sections. Every key has a default; unknown keys
//! are errors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::inference::InferenceConfig;
use crate::model::ModelConfig;
use crate::synthdata::SceneConfig;
use crate::training::TrainingConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainingConfig,
    pub infer: InferenceConfig,
    pub eval: EvalConfig,
    pub data: SceneConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration is always serialisable")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.infer.validate()?;
        self.eval.validate()?;
        self.data.validate()?;
        self.data.check_stride(self.model.downsampling_factor())
    }
}
