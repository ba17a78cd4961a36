//! Loss functionals and Monte Carlo risk estimators.
//!
//! Losses are evaluated on the latent marker at visit times; strategies only ever
//! see the noisy observations. Additive losses average over the post-baseline
//! visits selected by the [`LossWindow`], always normalized by `J`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::PosteriorState;
use crate::error::{Error, Result};
use crate::model::{ModelParams, SubjectCovariates, Trajectory, VisitSchedule};
use crate::simulation::{simulate_with_belief, NoiseBank, PopulationSpec};
use crate::strategies::StrategySpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskKind {
    /// `Y_{t_J}`.
    TerminalLevel,
    /// `1{Y_{t_J} > eta}`.
    TerminalExceedance,
    /// Visit average of `Y`.
    AdditiveMean,
    /// Visit average of `1{Y > eta}`.
    AdditiveExceedance,
}

/// Visits entering the additive sums.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWindow {
    /// `j = 1..=J`.
    #[default]
    AllVisits,
    /// `j = 1..=J-1`: the final visit neither costs nor is costed.
    ExcludeFinal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskSpec {
    pub kind: RiskKind,
    #[serde(default)]
    pub eta: f64,
    /// Weight of the treatment cost.
    pub omega: f64,
    #[serde(default)]
    pub window: LossWindow,
}

impl RiskSpec {
    pub fn additive_exceedance(eta: f64, omega: f64, window: LossWindow) -> Self {
        Self { kind: RiskKind::AdditiveExceedance, eta, omega, window }
    }

    pub fn terminal_level() -> Self {
        Self { kind: RiskKind::TerminalLevel, eta: 0.0, omega: 0.0, window: LossWindow::AllVisits }
    }

    pub fn with_omega(mut self, omega: f64) -> Self {
        self.omega = omega;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega >= 0.0) || !self.omega.is_finite() {
            return Err(Error::InvalidParams(format!("omega = {} must be finite and >= 0", self.omega)));
        }
        if self.uses_eta() && !self.eta.is_finite() {
            return Err(Error::InvalidParams("eta must be finite".into()));
        }
        Ok(())
    }

    pub fn uses_eta(&self) -> bool {
        matches!(self.kind, RiskKind::TerminalExceedance | RiskKind::AdditiveExceedance)
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.kind, RiskKind::TerminalLevel | RiskKind::TerminalExceedance)
    }

    /// Whether visit `j` (of `0..=big_j`) enters the additive sums.
    pub fn in_window(&self, j: usize, big_j: usize) -> bool {
        let last = match self.window {
            LossWindow::AllVisits => big_j,
            LossWindow::ExcludeFinal => big_j.saturating_sub(1),
        };
        (1..=last).contains(&j)
    }

    pub fn window_len(&self, big_j: usize) -> usize {
        match self.window {
            LossWindow::AllVisits => big_j,
            LossWindow::ExcludeFinal => big_j.saturating_sub(1),
        }
    }

    /// Per-visit marker functional.
    pub fn marker_term(&self, y: f64) -> f64 {
        match self.kind {
            RiskKind::TerminalLevel | RiskKind::AdditiveMean => y,
            RiskKind::TerminalExceedance | RiskKind::AdditiveExceedance => f64::from(u8::from(y > self.eta)),
        }
    }

    /// Whether the two specs define the same loss.
    pub fn same_loss(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.omega == other.omega
            && self.window == other.window
            && (!self.uses_eta() || self.eta == other.eta)
    }
}

/// Loss of one path, split into marker cost, unweighted treatment cost and the
/// fraction of window visits treated.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub marker: f64,
    pub treatment: f64,
    pub fraction: f64,
}

pub(crate) fn loss_parts(y: &[f64], a: &[u8], spec: &RiskSpec) -> LossParts {
    let big_j = y.len() - 1;
    let norm = big_j as f64;
    let marker = if spec.is_terminal() {
        spec.marker_term(y[big_j])
    } else {
        (1..=big_j).filter(|&j| spec.in_window(j, big_j)).map(|j| spec.marker_term(y[j])).sum::<f64>() / norm
    };
    let treated = (1..=big_j).filter(|&j| spec.in_window(j, big_j)).map(|j| f64::from(a[j])).sum::<f64>();
    let n_window = spec.window_len(big_j);
    LossParts {
        marker,
        treatment: treated / norm,
        fraction: if n_window > 0 { treated / n_window as f64 } else { 0.0 },
    }
}

/// `(marker cost, weighted treatment cost)` of one trajectory.
pub fn loss(traj: &Trajectory, spec: &RiskSpec) -> Result<(f64, f64)> {
    spec.validate()?;
    if traj.y.len() < 2 || traj.a.len() != traj.y.len() {
        return Err(Error::Alignment("loss needs aligned paths with at least one post-baseline visit".into()));
    }
    if traj.y.iter().any(|y| y.is_nan()) {
        return Err(Error::Contract("loss needs the latent marker path".into()));
    }
    let p = loss_parts(&traj.y, &traj.a, spec);
    Ok((p.marker, spec.omega * p.treatment))
}

/// Sufficient statistics of per-replicate losses, enough to form the estimate and
/// its standard error at any treatment weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossMoments {
    pub k: usize,
    pub mean_marker: f64,
    pub mean_treatment: f64,
    pub mean_fraction: f64,
    /// Centered sums of squares and cross products.
    pub css_marker: f64,
    pub css_treatment: f64,
    pub csp: f64,
}

impl LossMoments {
    /// Sequential two-pass reduction, so the result does not depend on threading.
    pub fn from_parts(parts: &[LossParts]) -> Self {
        let k = parts.len();
        let n = k as f64;
        let (mut sm, mut st, mut sf) = (0.0, 0.0, 0.0);
        for p in parts {
            sm += p.marker;
            st += p.treatment;
            sf += p.fraction;
        }
        let (mm, mt, mf) = (sm / n, st / n, sf / n);
        let (mut cmm, mut ctt, mut cmt) = (0.0, 0.0, 0.0);
        for p in parts {
            let (dm, dt) = (p.marker - mm, p.treatment - mt);
            cmm += dm * dm;
            ctt += dt * dt;
            cmt += dm * dt;
        }
        Self { k, mean_marker: mm, mean_treatment: mt, mean_fraction: mf, css_marker: cmm, css_treatment: ctt, csp: cmt }
    }

    pub fn total(&self, omega: f64) -> f64 {
        self.mean_marker + omega * self.mean_treatment
    }

    pub fn estimate(&self, spec: &RiskSpec) -> RiskEstimate {
        let w = spec.omega;
        let se = if self.k > 1 {
            let css = (self.css_marker + 2.0 * w * self.csp + w * w * self.css_treatment).max(0.0);
            (css / (self.k as f64 - 1.0) / self.k as f64).sqrt()
        } else {
            0.0
        };
        let cost_marker = self.mean_marker;
        let cost_treatment = w * self.mean_treatment;
        RiskEstimate {
            total: cost_marker + cost_treatment,
            cost_marker,
            cost_treatment,
            fraction_treated: self.mean_fraction,
            treatment_unweighted: self.mean_treatment,
            mc_se: se,
            k: self.k,
            spec: *spec,
        }
    }
}

/// Monte Carlo risk with its decomposition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub total: f64,
    pub cost_marker: f64,
    /// Treatment cost including the weight `omega`.
    pub cost_treatment: f64,
    pub fraction_treated: f64,
    pub treatment_unweighted: f64,
    pub mc_se: f64,
    pub k: usize,
    pub spec: RiskSpec,
}

impl RiskEstimate {
    pub const CSV_HEADER: [&'static str; 6] = ["total", "cost_y", "cost_trt", "pct_treated", "se", "k"];

    pub fn csv_row(&self) -> [String; 6] {
        [
            self.total.to_string(),
            self.cost_marker.to_string(),
            self.cost_treatment.to_string(),
            (100.0 * self.fraction_treated).to_string(),
            self.mc_se.to_string(),
            self.k.to_string(),
        ]
    }
}

/// Difference of two risks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    pub effect: f64,
    /// Combined standard error assuming independent estimates.
    pub se: f64,
}

pub fn contrast(a: &RiskEstimate, b: &RiskEstimate) -> Result<Contrast> {
    if !a.spec.same_loss(&b.spec) {
        return Err(Error::Contract("contrast of risks with different loss specifications".into()));
    }
    Ok(Contrast { effect: a.total - b.total, se: a.mc_se.hypot(b.mc_se) })
}

/// How each replicate obtains its covariates and effects.
#[derive(Clone, Debug)]
enum Units {
    /// One covariate profile, effects drawn from `belief`.
    Profile { cov: SubjectCovariates, belief: PosteriorState },
    /// Covariates and effects drawn from the population, per replicate.
    Population { covs: Vec<SubjectCovariates>, prior: PosteriorState },
}

/// A risk evaluation problem with its noise drawn once, so that any number of
/// strategies can be compared under common random numbers.
#[derive(Clone, Debug)]
pub struct RiskProblem {
    params: ModelParams,
    schedule: VisitSchedule,
    spec: RiskSpec,
    units: Units,
    bank: NoiseBank,
}

impl RiskProblem {
    fn build(params: &ModelParams, schedule: &VisitSchedule, spec: &RiskSpec, units: Units, k: usize, seed: u64) -> Result<Self> {
        params.validate()?;
        spec.validate()?;
        if k == 0 {
            return Err(Error::InvalidParams("at least one replicate is required".into()));
        }
        if schedule.j() == 0 {
            return Err(Error::InvalidSchedule("risk needs at least one post-baseline visit".into()));
        }
        Ok(Self {
            params: *params,
            schedule: schedule.clone(),
            spec: *spec,
            units,
            bank: NoiseBank::draw(seed, k, schedule.len()),
        })
    }

    /// Known parameters: realized effects on `cov` when present, population law otherwise.
    pub fn skp(params: &ModelParams, cov: &SubjectCovariates, schedule: &VisitSchedule, spec: &RiskSpec, k: usize, seed: u64) -> Result<Self> {
        cov.validate()?;
        let belief = PosteriorState::for_subject(params, cov);
        Self::build(params, schedule, spec, Units::Profile { cov: *cov, belief }, k, seed)
    }

    /// Effects drawn from `posterior` for every replicate.
    pub fn spdp(
        posterior: &PosteriorState,
        params: &ModelParams,
        cov: &SubjectCovariates,
        schedule: &VisitSchedule,
        spec: &RiskSpec,
        k: usize,
        seed: u64,
    ) -> Result<Self> {
        posterior.validate()?;
        cov.validate()?;
        Self::build(params, schedule, spec, Units::Profile { cov: *cov, belief: *posterior }, k, seed)
    }

    /// Marginal risk over the covariate and effect distribution of `pop`.
    pub fn marginal(pop: &PopulationSpec, schedule: &VisitSchedule, spec: &RiskSpec, k: usize, seed: u64) -> Result<Self> {
        pop.validate()?;
        let covs = (0..k as u64).map(|r| pop.draw_covariates(seed, r)).collect();
        let prior = PosteriorState::prior(&pop.params);
        Self::build(&pop.params, schedule, spec, Units::Population { covs, prior }, k, seed)
    }

    pub fn spec(&self) -> &RiskSpec {
        &self.spec
    }

    pub fn k(&self) -> usize {
        self.bank.k()
    }

    pub fn schedule(&self) -> &VisitSchedule {
        &self.schedule
    }

    /// Per-replicate loss parts under `strategy`, in replicate order.
    pub fn parts(&self, strategy: &StrategySpec) -> Result<Vec<LossParts>> {
        strategy.validate()?;
        let n = self.schedule.len();
        let times = self.schedule.times();
        (0..self.bank.k())
            .into_par_iter()
            .map_init(
                || Trajectory { y: vec![0.0; n], z: vec![0.0; n], a: vec![0; n] },
                |traj, r| {
                    let noise = self.bank.unit(r);
                    let (cov, belief) = match &self.units {
                        Units::Profile { cov, belief } => (cov, belief),
                        Units::Population { covs, prior } => (&covs[r], prior),
                    };
                    simulate_with_belief(&self.params, cov, belief, true, times, strategy, &noise, traj)?;
                    Ok(loss_parts(&traj.y, &traj.a, &self.spec))
                },
            )
            .collect()
    }

    pub fn moments(&self, strategy: &StrategySpec) -> Result<LossMoments> {
        Ok(LossMoments::from_parts(&self.parts(strategy)?))
    }

    pub fn evaluate(&self, strategy: &StrategySpec) -> Result<RiskEstimate> {
        Ok(self.moments(strategy)?.estimate(&self.spec))
    }
}

/// Risk for a fixed covariate profile with known parameters.
pub fn estimate_risk_skp(
    params: &ModelParams,
    cov: &SubjectCovariates,
    schedule: &VisitSchedule,
    strategy: &StrategySpec,
    spec: &RiskSpec,
    k: usize,
    seed: u64,
) -> Result<RiskEstimate> {
    RiskProblem::skp(params, cov, schedule, spec, k, seed)?.evaluate(strategy)
}

/// Risk averaging over a Gaussian law of the subject effects.
#[allow(clippy::too_many_arguments)]
pub fn estimate_risk_spdp(
    posterior: &PosteriorState,
    params: &ModelParams,
    cov: &SubjectCovariates,
    schedule: &VisitSchedule,
    strategy: &StrategySpec,
    spec: &RiskSpec,
    k: usize,
    seed: u64,
) -> Result<RiskEstimate> {
    RiskProblem::spdp(posterior, params, cov, schedule, spec, k, seed)?.evaluate(strategy)
}

/// Risk averaged over the population distribution of covariates and effects.
pub fn estimate_risk_marginal(
    pop: &PopulationSpec,
    schedule: &VisitSchedule,
    strategy: &StrategySpec,
    spec: &RiskSpec,
    k: usize,
    seed: u64,
) -> Result<RiskEstimate> {
    RiskProblem::marginal(pop, schedule, spec, k, seed)?.evaluate(strategy)
}
