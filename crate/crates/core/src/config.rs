//! Single JSON configuration file with one section per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::environment::EnvConfig;
use crate::error::{Error, Result};
use crate::graph_embed::TransEConfig;
use crate::policy::PolicyConfig;
use crate::recommender::ModelConfig;
use crate::simulator::SimulatorConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset file; `None` means the built-in synthetic benchmark.
    pub path: Option<PathBuf>,
    pub format: String,
    /// Train/validation/test ratios.
    pub split: [f64; 3],
    pub seed: u64,
    /// Directory for checkpoints and logs.
    pub artifacts: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { path: None, format: "jsonl".into(), split: [0.7, 0.15, 0.15], seed: 1, artifacts: PathBuf::from("artifacts") }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    #[serde(flatten)]
    pub rec: ModelConfig,
    pub kg: TransEConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvSection {
    #[serde(flatten)]
    pub env: EnvConfig,
    pub simulator: SimulatorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// `mscaa`, `maxe`, `random` or `oracle`.
    pub agent: String,
    /// `test` or `valid`.
    pub split: String,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { agent: "mscaa".into(), split: "test".into(), seed: 29 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    pub idle_timeout_secs: u64,
    /// Episode log appended on session termination; relative to artifacts.
    pub episode_log: PathBuf,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig { bind: "127.0.0.1:8080".into(), idle_timeout_secs: 3600, episode_log: PathBuf::from("service_episodes.jsonl") }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelSection,
    pub env: EnvSection,
    pub policy: PolicyConfig,
    pub eval: EvalConfig,
    pub service: ServiceConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Config = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.rec.validate()?;
        self.env.env.validate()?;
        self.env.simulator.validate()?;
        self.policy.validate()?;
        if self.model.kg.dim == 0 {
            return Err(Error::Config("kg dim must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.data.artifacts.join(name)
    }
}
