//! JSON configuration shared by every subcommand. Command-line flags are
//! applied on top of the loaded file.

use std::net::{IpAddr, Ipv4Addr};
use std::path::{Path, PathBuf};

use rrsearch::cascade::CascadeConfig;
use rrsearch::corpus::SequenceLimits;
use rrsearch::neural::ModelConfig;
use rrsearch::training::{PsConfig, TrainingConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Artifact locations. Training commands write to the same fields that
/// later commands read from, so one config drives the whole pipeline.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub codebase: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub dual: Option<PathBuf>,
    pub cross: Option<PathBuf>,
    pub index: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub dim: usize,
    /// Initialization seed. The cross encoder uses `seed + 1`.
    pub seed: u64,
    pub normalize: bool,
    pub min_freq: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            dim: 32,
            seed: 42,
            normalize: true,
            min_freq: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub paths: Paths,
    pub model: ModelSettings,
    pub limits: SequenceLimits,
    pub training: TrainingConfig,
    /// Optimizer settings for cross-encoder training. Falls back to
    /// `training` when absent.
    pub cross_training: Option<TrainingConfig>,
    pub ps: PsConfig,
    pub cascade: CascadeConfig,
    pub bind: IpAddr,
    pub port: u16,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            model: ModelSettings::default(),
            limits: SequenceLimits::default(),
            training: TrainingConfig::default(),
            cross_training: None,
            ps: PsConfig::default(),
            cascade: CascadeConfig::default(),
            bind: IpAddr::V4(Ipv4Addr::LOCALHOST),
            port: 7878,
        }
    }
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let json = serde_json::to_string_pretty(self).map_err(rrsearch::Error::from)?;
        std::fs::write(path, json).map_err(rrsearch::Error::from)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.port == 0 {
            return Err(CliError::Usage("port must be in 1..=65535".into()));
        }
        if self.model.dim == 0 {
            return Err(CliError::Usage("model dim must be positive".into()));
        }
        if self.limits.query == 0 || self.limits.code == 0 {
            return Err(CliError::Usage("sequence limits must be positive".into()));
        }
        let usage = |e: rrsearch::Error| CliError::Usage(e.to_string());
        self.training.validate().map_err(usage)?;
        self.cross_training().validate().map_err(usage)?;
        self.ps.validate().map_err(usage)?;
        Ok(())
    }

    pub fn cross_training(&self) -> &TrainingConfig {
        self.cross_training.as_ref().unwrap_or(&self.training)
    }

    /// Position table sized so the longest `[CLS] q [SEP] c` fits.
    pub fn model_config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            dim: self.model.dim,
            vocab_size,
            max_pos: self.limits.query + self.limits.code + 2,
            seed,
        }
    }
}

/// Returns the configured path or a usage error naming the flag.
pub fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    path.as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing --{flag} (or paths.{} in the config)", flag.replace('-', "_"))))
}
