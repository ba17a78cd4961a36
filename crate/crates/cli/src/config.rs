//! Run configuration: one JSON document with named sections.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use dyncontrol_core::bayes::HorizonModel;
use dyncontrol_core::{
    LossWindow, ModelParams, ObservationalAssignmentModel, PopulationSpec, RiskSpec, SearchConfig, StrategySpec,
    VisitSchedule,
};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopulationSection {
    pub n: usize,
    pub p_d: f64,
    /// Observational treatment assignment used when no strategy is given.
    pub assignment: ObservationalAssignmentModel,
}

impl Default for PopulationSection {
    fn default() -> Self {
        Self { n: 500, p_d: 0.6, assignment: ObservationalAssignmentModel::illustration() }
    }
}

/// Either `{"j": 10}` for unit spacing or an explicit list of visit times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<Vec<f64>>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { j: Some(10), times: None }
    }
}

impl ScheduleSection {
    pub fn build(&self) -> anyhow::Result<VisitSchedule> {
        match (&self.j, &self.times) {
            (Some(j), None) => Ok(VisitSchedule::unit(*j)),
            (None, Some(t)) => Ok(VisitSchedule::new(t.clone())?),
            _ => bail!("schedule needs exactly one of `j` or `times`"),
        }
    }
}

/// How per-replicate subject effects are obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskMode {
    /// Effects fixed at the population means.
    #[default]
    Skp,
    /// Effects drawn from their population law.
    Spdp,
    /// Covariates and effects drawn from the population.
    Marginal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSection {
    pub d: u8,
    pub c: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub workers: Option<usize>,
    /// Monte Carlo replicates for risk estimates.
    pub k: usize,
    pub mode: RiskMode,
    pub profile: ProfileSection,
    /// Profiles for sweeps; the four illustration profiles when empty.
    pub profiles: Vec<ProfileSection>,
    pub omegas: Vec<f64>,
    /// Cohort CSV for `fit`.
    pub cohort: Option<PathBuf>,
    /// Parametric bootstrap resamples for `fit`; 0 disables it.
    pub bootstrap: usize,
    /// Realized subject effects for `dtdr-run`; drawn from the prior when absent.
    pub effects: Option<[f64; 2]>,
    /// Thresholds cross-checked by `oracle-check`.
    pub oracle_thresholds: Vec<f64>,
    /// Per-visit simulation model of `dtdr-run`.
    pub dtdr_horizon: HorizonModel,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 1,
            workers: None,
            k: 10_000,
            mode: RiskMode::Skp,
            profile: ProfileSection { d: 0, c: 0.5 },
            profiles: Vec::new(),
            omegas: table_omegas(),
            cohort: None,
            bootstrap: 0,
            effects: None,
            oracle_thresholds: vec![-1.0, 0.0, 1.0],
            dtdr_horizon: HorizonModel::default(),
        }
    }
}

/// Default weight grid for threshold sweeps.
pub fn table_omegas() -> Vec<f64> {
    vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.5, 3.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelParams,
    pub population: PopulationSection,
    pub schedule: ScheduleSection,
    pub strategy: Option<StrategySpec>,
    pub risk: RiskSpec,
    pub search: SearchConfig,
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelParams::illustration(),
            population: PopulationSection::default(),
            schedule: ScheduleSection::default(),
            strategy: None,
            risk: RiskSpec::additive_exceedance(1.7, 0.5, LossWindow::ExcludeFinal),
            search: SearchConfig::default(),
            run: RunSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            }
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate()?;
        self.population_spec().validate()?;
        self.population.assignment.validate()?;
        self.schedule.build()?;
        if let Some(s) = &self.strategy {
            s.validate()?;
        }
        self.risk.validate()?;
        self.search.validate()?;
        if self.run.k == 0 {
            bail!("run.k must be positive");
        }
        if self.run.profile.d > 1 || self.run.profiles.iter().any(|p| p.d > 1) {
            bail!("profile D must be 0 or 1");
        }
        if self.run.workers == Some(0) {
            bail!("run.workers must be positive");
        }
        Ok(())
    }

    pub fn population_spec(&self) -> PopulationSpec {
        PopulationSpec { n: self.population.n, p_d: self.population.p_d, params: self.model }
    }
}
