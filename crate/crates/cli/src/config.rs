//! Run configuration document (`run-v1`).

use serde::{Deserialize, Serialize};

use ecapnet::model::ModelConfig;
use ecapnet::synth::DatasetSpec;
use ecapnet::train::TrainConfig;

pub const RUN_SCHEMA: &str = "run-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelChoice {
    Ecapnet {
        #[serde(default)]
        config: ModelConfig,
        /// Fit `config.input_norm` on the training split before training.
        #[serde(default)]
        fit_input_norm: bool,
    },
    Fcn {
        hidden: Vec<usize>,
    },
}

impl Default for ModelChoice {
    fn default() -> Self {
        Self::Ecapnet {
            config: ModelConfig::default(),
            fit_input_norm: false,
        }
    }
}

/// Missing sections and fields take their defaults; unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: String,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelChoice,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(bytes: &[u8]) -> Result<Self, String> {
        let cfg: RunConfig = serde_json::from_slice(bytes).map_err(|e| format!("run config: {e}"))?;
        if cfg.schema != RUN_SCHEMA {
            return Err(format!("run config: unsupported schema `{}` (expected {RUN_SCHEMA})", cfg.schema));
        }
        Ok(cfg)
    }
}
