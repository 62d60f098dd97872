//! Service and pipeline settings, read from a TOML file.
//!
//! Every section is optional and falls back to the library defaults:
//!
//! ```toml
//! [train]            # AMP/PPO settings
//! envs = 32
//! total_steps = 200000
//!
//! [sim]              # overrides [train.sim]
//! dt = 0.005
//!
//! [retarget]
//! mu = 0.1
//!
//! [motion]
//! duration = 4.0
//! dt = 0.02
//!
//! [server]
//! bind = "127.0.0.1:8080"
//! data_dir = "wordsmith-data"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use wordsmith_core::amp::TrainConfig;
use wordsmith_core::prompts::DEFAULT_TAU;
use wordsmith_core::retarget::RetargetConfig;
use wordsmith_core::sim::SimConfig;
use wordsmith_core::vqvae::VqVaeConfig;

pub const DATA_DIR_ENV: &str = "WORDSMITH_DATA_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Reference motion generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionSettings {
    /// Clip length [s].
    pub duration: f64,
    /// Frame step of the generated human clip [s].
    pub dt: f64,
}

impl Default for MotionSettings {
    fn default() -> Self {
        Self { duration: 4.0, dt: 0.02 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: String,
    pub data_dir: PathBuf,
    /// Training runs executed at the same time across all sessions.
    pub max_concurrent_runs: usize,
    /// Similarity threshold for the closest earlier prompt.
    pub tau: f64,
    /// Minimum spacing of reward events per run [s].
    pub reward_event_interval: f64,
    /// Upper bound on `steps` for rollout requests.
    pub max_rollout_steps: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("wordsmith-data"),
            max_concurrent_runs: 1,
            tau: DEFAULT_TAU,
            reward_event_interval: 0.2,
            max_rollout_steps: 20_000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub train: TrainConfig,
    /// When present, replaces `train.sim`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimConfig>,
    pub retarget: RetargetConfig,
    pub motion: MotionSettings,
    pub vqvae: VqVaeConfig,
    pub server: ServerConfig,
}

impl Config {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let cfg: Config =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.into(), detail: e.to_string() })?;
        cfg.resolved()
    }

    pub fn read(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::from_toml(&text, path)
    }

    /// The file at `path` if given, else defaults; then environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => Self::read(p)?,
            None => Self::default(),
        };
        if let Some(dir) = std::env::var_os(DATA_DIR_ENV).filter(|v| !v.is_empty()) {
            cfg.server.data_dir = dir.into();
        }
        Ok(cfg)
    }

    /// Folds `[sim]` into `train.sim` and checks the result.
    pub fn resolved(mut self) -> Result<Self, ConfigError> {
        if let Some(sim) = self.sim.take() {
            self.train.sim = sim;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.vqvae.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.motion.duration > 0.0) || !(self.motion.dt > 0.0) || self.motion.dt > self.motion.duration {
            return Err(ConfigError::Invalid("motion duration and dt must be positive with dt <= duration".into()));
        }
        if self.server.max_concurrent_runs == 0 {
            return Err(ConfigError::Invalid("server.max_concurrent_runs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.server.tau) {
            return Err(ConfigError::Invalid("server.tau must lie in [0, 1]".into()));
        }
        if !(self.server.reward_event_interval >= 0.0) {
            return Err(ConfigError::Invalid("server.reward_event_interval must be >= 0".into()));
        }
        Ok(())
    }
}
