//! The JSON run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::auction::EnvConfig;
use crate::data::DataConfig;
use crate::diffusion::SamplerConfig;
use crate::error::{Error, Result};
use crate::rollout::EvalConfig;
use crate::train::TrainConfig;

/// Every section and field is optional; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    /// Expert demonstrations and the behavior mixture logged around them.
    pub expert: DataConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|source| Error::Json {
            context: "run config".into(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json { source, .. } => Error::Json {
                context: path.display().to_string(),
                source,
            },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.expert.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        self.eval.validate()?;
        if self.train.schedule.steps < 1 {
            return Err(Error::config("train.schedule.steps", "must be at least 1"));
        }
        Ok(())
    }

    /// Applies `--seed`: data, training, sampling and behavior cloning.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.expert.seed = seed;
        self.train.seed = seed;
        self.sampler.seed = seed;
        self.eval.behavior_clone.seed = seed;
        self
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
