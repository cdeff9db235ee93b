use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use csmoe::evalx::LinearProbeConfig;
use csmoe::losses::LossConfig;
use csmoe::model::CsmoeConfig;
use csmoe::sampler::GaConfig;
use csmoe::train::TrainConfig;

use crate::CliError;

/// Every knob of every subcommand. Command-line flags override these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model init, sampling and training; defaults to `model.seed`.
    pub seed: Option<u64>,
    pub model: CsmoeConfig,
    pub sampler: GaConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub probe: LinearProbeConfig,
    pub paths: Paths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub archive: Option<PathBuf>,
    pub climate: Option<PathBuf>,
    pub thematic: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Reads a full run config, or a bare model config.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        match serde_json::from_str::<RunConfig>(&text) {
            Ok(c) => Ok(c),
            Err(full) => match serde_json::from_str::<CsmoeConfig>(&text) {
                Ok(model) => Ok(RunConfig { seed: Some(model.seed), model, ..RunConfig::default() }),
                Err(_) => Err(CliError::Data(format!("{}: invalid run config: {full}", path.display())).into()),
            },
        }
    }

    /// Applies `--seed` and pushes the single seed into every component.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self> {
        let s = seed.or(self.seed).unwrap_or(self.model.seed);
        self.seed = Some(s);
        self.model.seed = s;
        self.sampler.seed = s;
        self.model.validate().context("model config")?;
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.model.seed)
    }

    pub fn sampler_inputs(&self) -> Result<(&Path, &Path, &Path)> {
        fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
            p.as_deref()
                .ok_or_else(|| CliError::Usage(format!("missing {flag} (or paths.{} in the config)", &flag[2..])))
        }
        Ok((
            need(&self.paths.archive, "--archive")?,
            need(&self.paths.climate, "--climate")?,
            need(&self.paths.thematic, "--thematic")?,
        ))
    }
}
