//! Model configuration, read from JSON.
//!
//! An empty object `{}` is a complete configuration: every age-dependent block
//! uses the shrinkage cubic regression spline with two shared penalties.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{FleetKind, StockData};
use crate::error::{Error, Result};

/// Regime for one block as written in the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RegimeSpec {
    /// `"spline_cs"`, `"spline_bs"` or `"maximal"`.
    Named(String),
    /// `{"partition": [0, 0, 1, ...]}`; `-1` marks ages the fleet does not observe.
    Partition { partition: Vec<i64> },
}

impl Default for RegimeSpec {
    fn default() -> Self {
        RegimeSpec::Named("spline_cs".into())
    }
}

/// Survey-level regimes: one spec for every survey or a map keyed by fleet id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FleetRegimes {
    All(RegimeSpec),
    PerFleet(BTreeMap<String, RegimeSpec>),
}

impl Default for FleetRegimes {
    fn default() -> Self {
        FleetRegimes::All(RegimeSpec::default())
    }
}

impl FleetRegimes {
    pub fn for_fleet(&self, fleet: usize) -> Option<&RegimeSpec> {
        match self {
            FleetRegimes::All(r) => Some(r),
            FleetRegimes::PerFleet(m) => m.get(&fleet.to_string()),
        }
    }

    fn referenced_fleets(&self) -> Result<Vec<usize>> {
        match self {
            FleetRegimes::All(_) => Ok(Vec::new()),
            FleetRegimes::PerFleet(m) => m
                .keys()
                .map(|k| {
                    k.parse::<usize>()
                        .map_err(|_| Error::ConfigInvalid(format!("fleet key {k:?} is not an integer")))
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    CatchSd,
    SurveySd,
    Catchability,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Family::CatchSd => "catch_sd",
            Family::SurveySd => "survey_sd",
            Family::Catchability => "catchability",
        };
        f.write_str(s)
    }
}

/// Coefficient sharing across fleets: `fleet` reuses the coefficients of `same_as`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Alias {
    pub family: Family,
    pub fleet: usize,
    pub same_as: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoSpec {
    /// Estimated, starting from the given correlation.
    Estimate(f64),
    Fixed(f64),
}

impl Default for RhoSpec {
    fn default() -> Self {
        RhoSpec::Estimate(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProcessConfig {
    pub rho_f: RhoSpec,
    /// F state index per age (default: one state per age).
    pub f_states: Option<Vec<usize>>,
    /// Standard-deviation group per F state (default: one shared group).
    pub f_sd_groups: Option<Vec<usize>>,
}

impl Default for ProcessConfig {
    fn default() -> Self {
        ProcessConfig {
            rho_f: RhoSpec::default(),
            f_states: None,
            f_sd_groups: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// Location of the log-penalty cap.
    pub k: f64,
    /// Steepness of the log-penalty cap.
    pub delta: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig { k: 7.0, delta: 100.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub log_q: f64,
    pub log_sd: f64,
    pub log_lambda: f64,
    pub log_sd_r: f64,
    pub log_sd_n: f64,
    pub log_sd_f: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            log_q: -5.0,
            log_sd: -0.35,
            log_lambda: 0.0,
            log_sd_r: -0.35,
            log_sd_n: -0.35,
            log_sd_f: -0.7,
        }
    }
}

/// Log-penalties held fixed instead of estimated.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedPenalties {
    pub variance: Option<f64>,
    pub catchability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub max_iter: usize,
    /// Optimizer stops once the gradient ∞-norm is below `gtol * max(1, |f|)`.
    pub gtol: f64,
    /// Convergence is declared for gradient ∞-norm below `converge_tol * max(1, |f|)`.
    pub converge_tol: f64,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    /// Extra optimizer runs from jittered starts when the first run fails.
    pub restarts: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iter: 2000,
            gtol: 1e-8,
            converge_tol: 1e-5,
            inner_tol: 1e-8,
            inner_max_iter: 100,
            restarts: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RmseScale {
    #[default]
    Raw,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub name: Option<String>,
    pub catch_sd: RegimeSpec,
    pub survey_sd: FleetRegimes,
    pub catchability: FleetRegimes,
    pub aliases: Vec<Alias>,
    pub process: ProcessConfig,
    pub priors: PriorConfig,
    pub shrinkage_epsilon: f64,
    pub bs_degree: usize,
    pub init: InitConfig,
    pub fixed_log_lambda: FixedPenalties,
    pub optimizer: OptimizerConfig,
    pub rmse_scale: RmseScale,
    pub lognormal_mean: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            name: None,
            catch_sd: RegimeSpec::default(),
            survey_sd: FleetRegimes::default(),
            catchability: FleetRegimes::default(),
            aliases: Vec::new(),
            process: ProcessConfig::default(),
            priors: PriorConfig::default(),
            shrinkage_epsilon: 0.01,
            bs_degree: 3,
            init: InitConfig::default(),
            fixed_log_lambda: FixedPenalties::default(),
            optimizer: OptimizerConfig::default(),
            rmse_scale: RmseScale::Raw,
            lognormal_mean: false,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Same regime for every block.
    pub fn uniform(regime: RegimeSpec) -> Self {
        ModelConfig {
            catch_sd: regime.clone(),
            survey_sd: FleetRegimes::All(regime.clone()),
            catchability: FleetRegimes::All(regime),
            ..ModelConfig::default()
        }
    }

    /// Copy with per-fleet entries and aliases of the given surveys removed,
    /// for datasets from which those surveys were dropped.
    pub fn without_fleets(&self, fleets: &[usize]) -> ModelConfig {
        let mut out = self.clone();
        for regimes in [&mut out.survey_sd, &mut out.catchability] {
            if let FleetRegimes::PerFleet(m) = regimes {
                m.retain(|k, _| k.parse::<usize>().map_or(true, |f| !fleets.contains(&f)));
            }
        }
        out.aliases.retain(|a| !fleets.contains(&a.fleet) && !fleets.contains(&a.same_as));
        out
    }

    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| "model".into())
    }

    pub fn regime_spec(&self, family: Family, fleet: usize) -> Option<&RegimeSpec> {
        match family {
            Family::CatchSd => (fleet == 0).then_some(&self.catch_sd),
            Family::SurveySd => self.survey_sd.for_fleet(fleet),
            Family::Catchability => self.catchability.for_fleet(fleet),
        }
    }

    /// Checks that do not depend on the regime machinery.
    pub fn validate(&self, data: &StockData) -> Result<()> {
        let surveys: Vec<usize> = data
            .fleets
            .iter()
            .filter(|f| f.kind == FleetKind::Survey)
            .map(|f| f.fleet)
            .collect();
        for (name, regimes) in [("survey_sd", &self.survey_sd), ("catchability", &self.catchability)] {
            for f in regimes.referenced_fleets()? {
                if !surveys.contains(&f) {
                    return Err(Error::ConfigInvalid(format!(
                        "{name} references fleet {f}, which is not a survey of this stock"
                    )));
                }
            }
            if let FleetRegimes::PerFleet(m) = regimes {
                if let Some(f) = surveys.iter().find(|f| !m.contains_key(&f.to_string())) {
                    return Err(Error::ConfigInvalid(format!("{name} has no regime for survey {f}")));
                }
            }
        }
        for a in &self.aliases {
            let ok = |f: usize| match a.family {
                Family::CatchSd => false,
                _ => surveys.contains(&f),
            };
            if !ok(a.fleet) || !ok(a.same_as) || a.fleet == a.same_as {
                return Err(Error::ConfigInvalid(format!("invalid alias {a:?}")));
            }
        }
        let n_ages = data.n_ages();
        if let Some(states) = &self.process.f_states {
            if states.len() != n_ages {
                return Err(Error::ConfigInvalid(format!("f_states needs {n_ages} entries")));
            }
            let k = states.iter().max().map_or(0, |m| m + 1);
            if (0..k).any(|s| !states.contains(&s)) {
                return Err(Error::ConfigInvalid("f_states indices must cover 0..K".into()));
            }
        }
        let n_states = self.n_f_states(n_ages);
        if let Some(groups) = &self.process.f_sd_groups {
            if groups.len() != n_states {
                return Err(Error::ConfigInvalid(format!("f_sd_groups needs {n_states} entries")));
            }
            let g = groups.iter().max().map_or(0, |m| m + 1);
            if (0..g).any(|s| !groups.contains(&s)) {
                return Err(Error::ConfigInvalid("f_sd_groups indices must cover 0..G".into()));
            }
        }
        match self.process.rho_f {
            RhoSpec::Estimate(r) | RhoSpec::Fixed(r) if !(r > -1.0 && r < 1.0) => {
                return Err(Error::ConfigInvalid(format!("rho_f {r} outside (-1, 1)")))
            }
            _ => {}
        }
        if !(self.shrinkage_epsilon > 0.0) {
            return Err(Error::ConfigInvalid("shrinkage_epsilon must be positive".into()));
        }
        if !(2..=3).contains(&self.bs_degree) {
            return Err(Error::ConfigInvalid("bs_degree must be 2 or 3".into()));
        }
        if !(self.priors.delta > 0.0) || !self.priors.k.is_finite() {
            return Err(Error::ConfigInvalid("prior needs finite K and positive delta".into()));
        }
        Ok(())
    }

    pub fn f_state_of_age(&self, n_ages: usize) -> Vec<usize> {
        self.process.f_states.clone().unwrap_or_else(|| (0..n_ages).collect())
    }

    pub fn n_f_states(&self, n_ages: usize) -> usize {
        self.f_state_of_age(n_ages).iter().max().map_or(0, |m| m + 1)
    }

    pub fn f_sd_group_of_state(&self, n_ages: usize) -> Vec<usize> {
        self.process
            .f_sd_groups
            .clone()
            .unwrap_or_else(|| vec![0; self.n_f_states(n_ages)])
    }
}
