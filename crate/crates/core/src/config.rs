//! One TOML document describing a whole run, plus the manifest every command leaves
//! beside its outputs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::danet::NetConfig;
use crate::dataset::{DataConfig, Recipe};
use crate::evalx::EvalConfig;
use crate::obsmodel::{ChannelSpec, ObsConfig, Radiometer};
use crate::perturbx::{GainKind, OracleSetup};
use crate::toyatm::{GridSpec, ModelConfig, NatureConfig};
use crate::training::TrainConfig;
use crate::varoracle::{CovarianceB, CovarianceR};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: String, source: toml::de::Error },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Settings of the classical reference analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Side of the square analysis window in cells (the state dimension grows with its square).
    pub window: usize,
    /// Observation-error variance per observation channel (K²).
    pub obs_variance: Vec<f64>,
    /// `None` uses the covariance the background perturbations are drawn from.
    pub background: Option<CovarianceB>,
    pub gain: GainKind,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { window: 8, obs_variance: vec![0.05; 3], background: None, gain: GainKind::SingleObservation }
    }
}

/// Where single-observation experiments are run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbConfig {
    /// Position within the test split of the sample whose observations are perturbed.
    pub test_sample: usize,
    /// Observation channels (instrument numbering) put through the battery.
    pub channels: Vec<u8>,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self { test_sample: 0, channels: vec![9, 11] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: GridSpec,
    pub forecast: ModelConfig,
    pub nature: NatureConfig,
    pub channels: Vec<ChannelSpec>,
    pub obs: ObsConfig,
    pub data: DataConfig,
    pub net: NetConfig,
    /// Keys left out of `[train]` take the desk schedule, not the full-length one.
    #[serde(deserialize_with = "desk_train")]
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub oracle: OracleConfig,
    pub perturb: PerturbConfig,
}

fn desk_train<'de, D: serde::Deserializer<'de>>(d: D) -> Result<TrainConfig, D::Error> {
    use serde::de::Error;
    let patch = toml::Table::deserialize(d)?;
    let mut base = toml::Table::try_from(TrainConfig::desk()).map_err(D::Error::custom)?;
    base.extend(patch);
    toml::Value::Table(base).try_into().map_err(D::Error::custom)
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            forecast: ModelConfig::desk_forecast(),
            nature: NatureConfig::default(),
            channels: ChannelSpec::desk_channels(),
            obs: ObsConfig::default(),
            data: DataConfig::default(),
            net: NetConfig::default(),
            train: TrainConfig::desk(),
            eval: EvalConfig::default(),
            oracle: OracleConfig::default(),
            perturb: PerturbConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let name = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: name.clone(), source })?;
        let cfg = Self::from_toml(&text).map_err(|source| ConfigError::Parse { path: name, source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes the fully resolved configuration as `config.toml` in `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<(), ConfigError> {
        let path = dir.join("config.toml");
        std::fs::create_dir_all(dir)
            .and_then(|_| std::fs::write(&path, self.to_toml()))
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.grid.validate().map_err(|e| bad(&e))?;
        self.forecast.validate(&self.grid).map_err(|e| bad(&e))?;
        self.nature.validate(&self.grid).map_err(|e| bad(&e))?;
        self.obs.validate(&self.grid).map_err(|e| bad(&e))?;
        self.radiometer()?;
        self.train.validate().map_err(|e| bad(&e))?;
        let net = &self.net;
        if net.channels != self.grid.channels() || net.h != self.grid.h || net.w != self.grid.w {
            return Err(ConfigError::Invalid("net extent and channels must match the grid".into()));
        }
        if net.frames != self.obs.frames || net.obs_channels != self.channels.len() || net.crop != self.obs.crop {
            return Err(ConfigError::Invalid("net frames, observation channels and crop must match the observing system".into()));
        }
        net.validate().map_err(|e| bad(&e))?;
        if self.oracle.obs_variance.len() != self.channels.len() || self.oracle.window == 0 {
            return Err(ConfigError::Invalid("oracle needs one observation variance per channel and a positive window".into()));
        }
        self.oracle_r().validate().map_err(|e| bad(&e))?;
        if self.perturb.channels.iter().any(|c| !self.channels.iter().any(|s| s.id == *c)) {
            return Err(ConfigError::Invalid(format!("perturbation channels {:?} are not all observed", self.perturb.channels)));
        }
        Ok(())
    }

    pub fn recipe(&self) -> Recipe<'_> {
        Recipe {
            grid: &self.grid,
            forecast: &self.forecast,
            nature: &self.nature,
            channels: &self.channels,
            obs: &self.obs,
            data: &self.data,
        }
    }

    pub fn radiometer(&self) -> Result<Radiometer, ConfigError> {
        Radiometer::new(&self.channels, &self.grid.levels).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn oracle_b(&self) -> CovarianceB {
        self.oracle.background.clone().unwrap_or_else(|| CovarianceB::from_noise(&self.nature.background))
    }

    pub fn oracle_r(&self) -> CovarianceR {
        CovarianceR { variances: self.oracle.obs_variance.clone() }
    }

    pub fn oracle_setup<'a>(&'a self, radiometer: &'a Radiometer, b: &'a CovarianceB, r: &'a CovarianceR) -> OracleSetup<'a> {
        OracleSetup { grid: &self.grid, radiometer, b, r, window: self.oracle.window, gain: self.oracle.gain }
    }
}

/// Record of one command invocation: enough to re-run it and to check its outputs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub created: String,
    pub args: Vec<String>,
    /// Named input digests, e.g. the dataset content hash or a checkpoint checksum.
    pub inputs: BTreeMap<String, String>,
    /// Output file (relative path) → SHA-256.
    pub outputs: BTreeMap<String, String>,
    /// Free-form scalar results worth archiving.
    pub values: BTreeMap<String, f64>,
}

impl Manifest {
    pub fn new(command: &str, args: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            created: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            args,
            ..Self::default()
        }
    }

    /// Hashes every regular file under `dir` (except the manifest itself) into `outputs`.
    pub fn record_outputs(&mut self, dir: &Path) -> std::io::Result<()> {
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d)? {
                let p = entry?.path();
                if p.is_dir() {
                    stack.push(p);
                    continue;
                }
                let rel = p.strip_prefix(dir).unwrap_or(&p).to_string_lossy().replace('\\', "/");
                if rel != "manifest.toml" {
                    self.outputs.insert(rel, crate::formats::sha256_hex(&std::fs::read(&p)?));
                }
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = toml::to_string(self).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        std::fs::write(dir.join("manifest.toml"), text)
    }
}
