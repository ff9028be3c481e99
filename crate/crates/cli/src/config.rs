//! JSON run configurations. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use eqsw_core::eecore::SolverConfig;
use eqsw_core::estimators::{GammaBasis, OutcomeSpec};
use eqsw_core::nuisance::{LogisticSpec, PooledLogisticSpec};
use eqsw_core::pipeline::{NuisanceMode, OutcomeMode, TreatmentModelMode};
use eqsw_core::simlab::Generator;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimatorConfig {
    Iptw {
        propensity: LogisticSpec,
        #[serde(default = "score")]
        nuisance: NuisanceMode,
    },
    Aipw {
        propensity: LogisticSpec,
        #[serde(default = "score")]
        nuisance: NuisanceMode,
        outcome: OutcomeSpec,
        #[serde(default = "estimated")]
        xi: OutcomeMode,
    },
    Snmm {
        gamma_basis: GammaBasis,
        treatment: PooledLogisticSpec,
        #[serde(default = "estimated_treatment")]
        nuisance: TreatmentModelMode,
    },
}

fn score() -> NuisanceMode {
    NuisanceMode::Score
}

fn estimated() -> OutcomeMode {
    OutcomeMode::Estimated
}

fn estimated_treatment() -> TreatmentModelMode {
    TreatmentModelMode::Estimated
}

fn default_level() -> f64 {
    0.95
}

fn default_b() -> usize {
    500
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    #[serde(default = "default_b")]
    pub b: usize,
    #[serde(default = "default_level")]
    pub level: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            b: default_b(),
            level: default_level(),
        }
    }
}

/// Configuration shared by `fit`, `bootstrap` and `diagnose`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// CSV path, relative to the config file.
    pub data: PathBuf,
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    /// Confidence level of the reported Wald intervals.
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    /// Built-in scenario (`s1`, `s2`, `s3`) unless `generator` is given.
    pub scenario: String,
    pub n: usize,
    pub replications: usize,
    #[serde(default)]
    pub generator: Option<Generator>,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub seed: u64,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn check_level(level: f64) -> Result<(), CliError> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(CliError::Config(format!("level must be in (0, 1), got {level}")))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut cfg: Self = read_json(path)?;
        if cfg.data.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data = dir.join(&cfg.data);
            }
        }
        check_level(cfg.level)?;
        check_level(cfg.bootstrap.level)?;
        Ok(cfg)
    }
}

impl SimulateConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let cfg: Self = read_json(path)?;
        check_level(cfg.level)?;
        if cfg.replications < 2 {
            return Err(CliError::Config("replications must be at least 2".into()));
        }
        Ok(cfg)
    }
}
