use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::Formulation;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::learn::LearnConfig;
use crate::meta::{AdaptConfig, MetaConfig};
use crate::sim::{wind_by_label, SimConfig, WindCondition};
use crate::sindy::SindyConfig;

/// Units in which errors are reported or curves are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    /// Standardized with the adaptation split's statistics.
    #[default]
    Normalized,
    Physical,
}

impl Units {
    pub fn name(self) -> &'static str {
        match self {
            Units::Normalized => "normalized",
            Units::Physical => "physical",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub formulations: Vec<Formulation>,
    pub train_tasks: Vec<String>,
    pub eval_tasks: Vec<String>,
    pub adapt_fraction: f64,
    /// Moving-average window applied before differencing; 0 or 1 is off.
    pub smoothing_window: usize,
    /// Trajectory for train task `i` uses seed `data_seed + i`, eval task `j`
    /// uses `data_seed + 100 + j`.
    pub data_seed: u64,
    pub report_units: Units,
    pub overlay_units: Units,
    /// Formulation whose cells get overlay SVGs.
    pub overlay_formulation: Option<Formulation>,
    pub basis_range: [f64; 2],
    pub basis_samples: usize,
    /// Directory of recorded `<label>.csv` logs used instead of the simulator.
    pub data_dir: Option<PathBuf>,
    pub column_mapping: Option<PathBuf>,
    pub execution: Execution,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            formulations: Formulation::ALL.to_vec(),
            train_tasks: crate::sim::meta_train_winds().into_iter().map(|w| w.label).collect(),
            eval_tasks: crate::sim::eval_winds().into_iter().map(|w| w.label).collect(),
            adapt_fraction: 0.5,
            smoothing_window: 0,
            data_seed: 0,
            report_units: Units::Normalized,
            overlay_units: Units::Physical,
            overlay_formulation: Some(Formulation::Full),
            basis_range: [-std::f64::consts::PI, std::f64::consts::PI],
            basis_samples: 629,
            data_dir: None,
            column_mapping: None,
            execution: Execution::Parallel,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.formulations.is_empty() {
            return Err(Error::Config("eval.formulations is empty".into()));
        }
        if self.train_tasks.is_empty() || self.eval_tasks.is_empty() {
            return Err(Error::Config("eval.train_tasks and eval.eval_tasks must be non-empty".into()));
        }
        if !(self.adapt_fraction > 0.0 && self.adapt_fraction < 1.0) {
            return Err(Error::Config(format!(
                "eval.adapt_fraction must lie in (0, 1), got {}",
                self.adapt_fraction
            )));
        }
        let [lo, hi] = self.basis_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) || self.basis_samples < 2 {
            return Err(Error::Config(format!(
                "eval.basis_range must be increasing and finite with at least 2 samples, got [{lo}, {hi}] x {}",
                self.basis_samples
            )));
        }
        if self.data_dir.is_none() {
            for label in self.train_tasks.iter().chain(&self.eval_tasks) {
                if wind_by_label(label).is_none() {
                    return Err(Error::Config(format!("unknown wind task `{label}`")));
                }
            }
        }
        Ok(())
    }

    pub fn train_winds(&self) -> Result<Vec<WindCondition>> {
        lookup(&self.train_tasks)
    }

    pub fn eval_winds(&self) -> Result<Vec<WindCondition>> {
        lookup(&self.eval_tasks)
    }
}

pub(crate) fn lookup(labels: &[String]) -> Result<Vec<WindCondition>> {
    labels
        .iter()
        .map(|l| wind_by_label(l).ok_or_else(|| Error::Config(format!("unknown wind task `{l}`"))))
        .collect()
}

/// Everything a run depends on. Serialized field order is fixed, so
/// [`Config::hash`] is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub simulator: SimConfig,
    pub sindy: SindyConfig,
    pub learn: LearnConfig,
    pub meta: MetaConfig,
    pub adapt: AdaptConfig,
    pub eval: EvalConfig,
}

impl Config {
    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |section: &str, r: Result<()>| r.map_err(|e| Error::Config(format!("[{section}] {e}")));
        wrap("simulator", self.simulator.validate())?;
        wrap("sindy", self.sindy.validate())?;
        wrap("learn", self.learn.validate())?;
        wrap("meta", self.meta.validate())?;
        wrap("adapt", self.adapt.validate())?;
        self.eval.validate()
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Applies `--seed` to every seeded stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.meta.seed = seed;
        self.adapt.seed = seed;
        self.eval.data_seed = seed;
    }
}
