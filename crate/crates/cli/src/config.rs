//! Run configuration.
//!
//! A TOML document with one optional table per command plus a top-level
//! `seed`. Every table and key is optional; unknown keys are rejected.
//!
//! ```toml
//! seed = 7
//!
//! [simulate]
//! mode = "random"      # random | explicit | exclusive | imperfect
//! samples = 20
//! n = 5
//! d = 4
//! rounds = 5
//!
//! [fit]
//! objective = "kl"     # kl | mse
//! reg_lambda = 1e-3
//!
//! [analyze]
//! normalization = "max"   # max | second_largest
//!
//! [verify]
//! mc_samples = 100000
//! ```

use std::path::Path;

use fjlab_core::estimation::{FitConfig, Objective};
use fjlab_core::metrics::{InfluenceNormalization, MetricOptions, DEFAULT_CONSENSUS_THRESHOLD};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::format::read_text;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub simulate: SimulateConfig,
    pub fit: FitSection,
    pub analyze: AnalyzeSection,
    pub verify: VerifySection,
    pub compare: CompareSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulateMode {
    #[default]
    Random,
    Explicit,
    Exclusive,
    Imperfect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub mode: SimulateMode,
    /// Samples per pool.
    pub samples: usize,
    pub pools: usize,
    pub n: usize,
    pub d: usize,
    pub rounds: usize,
    /// Range for random stubbornness; in imperfect mode the least and most
    /// confident agents get the two ends.
    pub gamma_range: [f64; 2],
    pub alpha_range: [f64; 2],
    // explicit mode
    pub gamma: Option<Vec<f64>>,
    pub alpha: Option<Vec<f64>>,
    pub weights: Option<Vec<Vec<f64>>>,
    pub mask: Option<Vec<Vec<bool>>>,
    pub innate: Option<Vec<Vec<f64>>>,
    pub label: Option<usize>,
    pub label_names: Option<Vec<String>>,
    // scenario modes
    pub epsilon: f64,
    pub rho: Option<Vec<f64>>,
    pub p: f64,
    pub u: f64,
    pub c: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            mode: SimulateMode::Random,
            samples: 20,
            pools: 1,
            n: 5,
            d: 4,
            rounds: 5,
            gamma_range: [0.05, 0.95],
            alpha_range: [0.0, 0.9],
            gamma: None,
            alpha: None,
            weights: None,
            mask: None,
            innate: None,
            label: None,
            label_names: None,
            epsilon: 0.1,
            rho: None,
            p: 0.9,
            u: 0.05,
            c: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub objective: String,
    pub max_iters: usize,
    pub step_size: f64,
    pub restarts: usize,
    pub reg_lambda: f64,
    pub tol: f64,
}

impl Default for FitSection {
    fn default() -> Self {
        let d = FitConfig::default();
        Self {
            objective: d.objective.name().into(),
            max_iters: d.max_iters,
            step_size: d.step_size,
            restarts: d.restarts,
            reg_lambda: d.reg_lambda,
            tol: d.tol,
        }
    }
}

impl FitSection {
    pub fn to_fit_config(&self, seed: u64) -> CliResult<FitConfig> {
        let objective: Objective = self.objective.parse()?;
        let cfg = FitConfig {
            objective,
            max_iters: self.max_iters,
            step_size: self.step_size,
            restarts: self.restarts,
            reg_lambda: self.reg_lambda,
            seed,
            tol: self.tol,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    /// Readout weights; uniform when absent.
    pub eta: Option<Vec<f64>>,
    pub normalization: String,
    pub consensus_threshold: f64,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self {
            eta: None,
            normalization: "max".into(),
            consensus_threshold: DEFAULT_CONSENSUS_THRESHOLD,
        }
    }
}

impl AnalyzeSection {
    pub fn to_options(&self) -> CliResult<MetricOptions> {
        let normalization = match self.normalization.as_str() {
            "max" => InfluenceNormalization::Max,
            "second_largest" => InfluenceNormalization::SecondLargest,
            other => return Err(CliError::Config(format!("unknown normalization {other:?}"))),
        };
        Ok(MetricOptions {
            eta: self.eta.clone(),
            normalization,
            consensus_threshold: self.consensus_threshold,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    /// Random parameter draws for the equilibrium checks.
    pub param_draws: usize,
    /// Random draws for the algebraic identities.
    pub identity_draws: usize,
    pub mc_samples: usize,
    pub exclusive_n: usize,
    pub exclusive_d: usize,
    pub epsilon: f64,
    pub imperfect_n: usize,
    pub imperfect_d: usize,
    pub p: f64,
    pub u: f64,
    pub c: f64,
    pub comparison_samples: usize,
    /// Inverse temperature of the confidence router in the routing checks.
    pub beta: f64,
    pub mc_tolerance: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            param_draws: 200,
            identity_draws: 1000,
            mc_samples: 100_000,
            exclusive_n: 5,
            exclusive_d: 10,
            epsilon: 0.1,
            imperfect_n: 5,
            imperfect_d: 4,
            p: 0.9,
            u: 0.05,
            c: 0.7,
            comparison_samples: 500,
            beta: 5.0,
            mc_tolerance: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    pub objective: String,
    pub max_iters: usize,
    pub restarts: usize,
    pub reg_lambda: f64,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            objective: "kl".into(),
            max_iters: 500,
            restarts: 2,
            reg_lambda: 1e-3,
        }
    }
}

impl CompareSection {
    pub fn to_fit_config(&self, seed: u64) -> CliResult<FitConfig> {
        FitSection {
            objective: self.objective.clone(),
            max_iters: self.max_iters,
            restarts: self.restarts,
            reg_lambda: self.reg_lambda,
            ..FitSection::default()
        }
        .to_fit_config(seed)
    }
}
