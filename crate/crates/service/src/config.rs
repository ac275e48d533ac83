//! Service configuration file.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use interrogate_core::access::{Role, TierPolicy};
use interrogate_core::session::SessionConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variable that overrides `data_dir`.
pub const DATA_DIR_ENV: &str = "INTERROGATE_DATA_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClockMode {
    System,
    /// Frozen at `at`; for demonstrations and reproducible runs.
    Fixed { at: DateTime<Utc> },
}

/// One API bearer token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Credential {
    pub token: String,
    pub role: Role,
    pub principal: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub data_dir: PathBuf,
    pub clock: ClockMode,
    /// Minimum number of sessions sharing a query sequence before it is flagged.
    pub anomaly_k: usize,
    /// Register the bundled fixture models at startup.
    pub builtin_models: bool,
    /// Directory of model descriptors (`*.toml`) loaded at startup.
    pub models_dir: Option<PathBuf>,
    pub session: SessionConfig,
    pub tiers: TierPolicy,
    pub credentials: Vec<Credential>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            data_dir: PathBuf::from("data"),
            clock: ClockMode::System,
            anomaly_k: 10,
            builtin_models: true,
            models_dir: None,
            session: SessionConfig::default(),
            tiers: TierPolicy::default(),
            credentials: Vec::new(),
        }
    }
}

impl ServiceConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: ServiceConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::parse(&text)?;
        if let Some(base) = path.parent() {
            if config.data_dir.is_relative() {
                config.data_dir = base.join(&config.data_dir);
            }
            if let Some(dir) = config.models_dir.as_mut().filter(|d| d.is_relative()) {
                *dir = base.join(&*dir);
            }
        }
        Ok(config)
    }

    /// Apply the data directory override, if set.
    pub fn with_data_dir_override(mut self, value: Option<String>) -> Self {
        if let Some(dir) = value.filter(|v| !v.is_empty()) {
            self.data_dir = PathBuf::from(dir);
        }
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut tokens = std::collections::BTreeSet::new();
        for c in &self.credentials {
            if c.token.is_empty() || c.principal.is_empty() {
                return Err(ConfigError::Invalid("credentials need a token and a principal".into()));
            }
            if !tokens.insert(c.token.as_str()) {
                return Err(ConfigError::Invalid("duplicate credential token".into()));
            }
        }
        if self.anomaly_k < 2 {
            return Err(ConfigError::Invalid("anomaly_k must be at least 2".into()));
        }
        if self.tiers.delay_hours < 0 || self.tiers.response_deadline_hours <= 0 {
            return Err(ConfigError::Invalid("tier delays must be non-negative and deadlines positive".into()));
        }
        self.session
            .divergence
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}
