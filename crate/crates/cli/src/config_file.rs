//! TOML experiment configs and their content digest.

use std::path::Path;

use bapo_core::{ExperimentConfig, TrainerConfig};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Reads a config file. `None` yields the all-defaults config.
pub fn load(path: Option<&Path>) -> CliResult<ExperimentConfig> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse(&text).map_err(|reason| CliError::Config {
        path: path.display().to_string(),
        reason,
    })
}

pub fn parse(text: &str) -> Result<ExperimentConfig, String> {
    toml::from_str(text).map_err(|e| e.to_string().trim_end().to_string())
}

pub fn to_toml(cfg: &ExperimentConfig) -> String {
    toml::to_string(cfg).expect("experiment configs always serialize")
}

/// Resolves defaults and validates; errors are config errors naming the key.
pub fn resolve(cfg: &ExperimentConfig, origin: &str) -> CliResult<(ExperimentConfig, TrainerConfig)> {
    let as_config = |e: bapo_core::Error| CliError::Config {
        path: origin.to_string(),
        reason: e.to_string(),
    };
    let resolved = cfg.resolved().map_err(as_config)?;
    let trainer = resolved.resolve().map_err(as_config)?;
    Ok((resolved, trainer))
}

/// SHA-256 of the canonical TOML form of a resolved config, hex encoded.
pub fn digest(resolved: &ExperimentConfig) -> String {
    hex::encode(Sha256::digest(to_toml(resolved).as_bytes()))
}
