//! The JSON configuration file shared by the service and the command line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::ProviderConfig;
use crate::analytics::DEFAULT_GROUP_FLOOR;
use crate::consensus::{SelectionConfig, TrainConfig};
use crate::domain::{TagRegistry, UserId};
use crate::fixtures;
use crate::taxonomy::TaxonomyNode;

pub const ADMIN_TOKEN_ENV: &str = "CONCORD_ADMIN_TOKEN";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("taxonomy: {0}")]
    Taxonomy(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrainTrigger {
    /// Retrain once this many ratings arrived since the last fit.
    pub every_n_ratings: Option<u64>,
    /// Retrain on a fixed period as well.
    pub interval_secs: Option<u64>,
}

impl Default for RetrainTrigger {
    fn default() -> Self {
        RetrainTrigger {
            every_n_ratings: Some(50),
            interval_secs: None,
        }
    }
}

/// Bearer tokens mapped to the users they authenticate. With no tokens and
/// no admin token configured, the API is open.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuthConfig {
    pub tokens: BTreeMap<String, UserId>,
    pub admin_token: Option<String>,
}

impl AuthConfig {
    pub fn is_open(&self) -> bool {
        self.tokens.is_empty() && self.admin_token.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    /// Directory for the event log and snapshots; in memory when absent.
    pub storage_root: Option<PathBuf>,
    pub provider: ProviderConfig,
    pub train: TrainConfig,
    pub selection: SelectionConfig,
    pub dedup_threshold: f64,
    pub retrain: RetrainTrigger,
    pub tags: TagRegistry,
    /// Topic tree file; the bundled political taxonomy when absent.
    pub taxonomy_path: Option<PathBuf>,
    pub auth: AuthConfig,
    pub group_floor: usize,
    /// Write a state snapshot every this many events.
    pub snapshot_every: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            listen: "127.0.0.1:8080".into(),
            storage_root: None,
            provider: ProviderConfig::default(),
            train: TrainConfig::default(),
            selection: SelectionConfig::default(),
            dedup_threshold: 0.9,
            retrain: RetrainTrigger::default(),
            tags: TagRegistry::default(),
            taxonomy_path: None,
            auth: AuthConfig::default(),
            group_floor: DEFAULT_GROUP_FLOOR,
            snapshot_every: 500,
        }
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })
}

impl ServiceConfig {
    /// Reads, fills in the admin token from the environment if unset, and validates.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let mut cfg: ServiceConfig = serde_json::from_str(&read(path)?).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        if cfg.auth.admin_token.is_none() {
            cfg.auth.admin_token = std::env::var(ADMIN_TOKEN_ENV).ok().filter(|t| !t.is_empty());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.selection.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.dedup_threshold > 0.0 && self.dedup_threshold <= 1.0) {
            return Err(ConfigError::Invalid("dedup_threshold must lie in (0, 1]".into()));
        }
        if self.retrain.every_n_ratings == Some(0) {
            return Err(ConfigError::Invalid("retrain.every_n_ratings must be at least 1".into()));
        }
        if self.retrain.interval_secs == Some(0) {
            return Err(ConfigError::Invalid("retrain.interval_secs must be at least 1".into()));
        }
        if self.snapshot_every == 0 {
            return Err(ConfigError::Invalid("snapshot_every must be at least 1".into()));
        }
        if let Some(path) = &self.taxonomy_path {
            if !path.is_file() {
                return Err(ConfigError::Invalid(format!("taxonomy file {} does not exist", path.display())));
            }
        }
        Ok(())
    }

    pub fn taxonomy(&self) -> Result<TaxonomyNode, ConfigError> {
        match &self.taxonomy_path {
            Some(path) => TaxonomyNode::load(path).map_err(|e| ConfigError::Taxonomy(e.to_string())),
            None => Ok(fixtures::political_taxonomy()),
        }
    }
}

/// Reads training settings from either a full configuration file (its
/// `train` section) or a bare training config.
pub fn load_train_config(path: impl AsRef<Path>) -> Result<TrainConfig, ConfigError> {
    load_section(path.as_ref(), |c| c.train)
}

/// Like [`load_train_config`], for the `selection` section.
pub fn load_selection_config(path: impl AsRef<Path>) -> Result<SelectionConfig, ConfigError> {
    load_section(path.as_ref(), |c| c.selection)
}

fn load_section<T: serde::de::DeserializeOwned>(
    path: &Path,
    pick: impl FnOnce(ServiceConfig) -> T,
) -> Result<T, ConfigError> {
    let text = read(path)?;
    if let Ok(full) = serde_json::from_str::<ServiceConfig>(&text) {
        return Ok(pick(full));
    }
    serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.to_path_buf(),
        source,
    })
}
