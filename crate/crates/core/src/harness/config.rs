use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::eval::BootstrapConfig;
use super::experiments::{RobustnessConfig, SweepGrid};
use crate::dqn::{DqnConfig, Optimizer};
use crate::env::{RewardParams, StateNorms};
use crate::error::{Error, Result};
use crate::memory::ModelSpec;
use crate::surrogate::{gen_surrogate, load_surrogate, SurrogateGenParams, SurrogateModel};
use crate::workload::TraceGenConfig;

/// Where the surrogate comes from: a config file, or the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateSource {
    pub path: Option<PathBuf>,
    pub seed: u64,
    pub generator: SurrogateGenParams,
}

impl Default for SurrogateSource {
    fn default() -> Self {
        Self {
            path: None,
            seed: 0,
            generator: SurrogateGenParams::default(),
        }
    }
}

/// Complete experiment description, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Preset name or path to a model spec file.
    pub model: String,
    pub surrogate: SurrogateSource,
    pub reward: RewardParams,
    pub norms: StateNorms,
    pub dqn: DqnConfig,
    pub train_trace: TraceGenConfig,
    pub eval_trace: TraceGenConfig,
    pub sweep: SweepGrid,
    pub robustness: RobustnessConfig,
    pub bootstrap: BootstrapConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: "llama2-7b-like".into(),
            surrogate: SurrogateSource::default(),
            reward: RewardParams::default(),
            norms: StateNorms::default(),
            dqn: DqnConfig {
                gamma: 0.9,
                optimizer: Optimizer::Adam,
                learning_rate: 3e-4,
                episodes: 3000,
                ..DqnConfig::default()
            },
            train_trace: TraceGenConfig {
                seed: 1,
                ..TraceGenConfig::default()
            },
            eval_trace: TraceGenConfig {
                seed: 2,
                count: 200,
                ..TraceGenConfig::default()
            },
            sweep: SweepGrid::default(),
            robustness: RobustnessConfig::default(),
            bootstrap: BootstrapConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.reward.validate()?;
        self.dqn.validate()?;
        self.train_trace.validate()?;
        self.eval_trace.validate()?;
        self.surrogate.generator.validate()?;
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        match ModelSpec::preset(&self.model) {
            Some(spec) => Ok(spec),
            None => ModelSpec::load(&self.model),
        }
    }

    pub fn surrogate_model(&self, spec: &ModelSpec) -> Result<SurrogateModel> {
        let model = match &self.surrogate.path {
            Some(path) => load_surrogate(path)?,
            None => gen_surrogate(spec, self.surrogate.seed, &self.surrogate.generator)?,
        };
        if model.n_layers() != spec.n_layers {
            return Err(Error::Dimension {
                expected: spec.n_blocks(),
                got: 2 * model.n_layers() as usize,
            });
        }
        Ok(model)
    }
}
