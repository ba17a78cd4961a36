//! Deterministic risk computations used to check the Monte Carlo estimators.
//!
//! Fixed regimes have Gaussian marker laws at every visit, so their risk is a
//! closed-form sum. Adaptive rules are handled by propagating the joint law of
//! the state on a grid, visit by visit:
//!
//! * rules that look at the current observation only need the latent marker
//!   `y` and the previous treatment, since the decision probability given `y`
//!   integrates the measurement noise exactly;
//! * prediction rules also need the filter mean `s` of the marker, which with
//!   known effects is a sufficient statistic of the observed history, and whose
//!   update given the next latent value is Gaussian.
//!
//! Transitions are discretized with bin-mass kernels (differences of normal
//! CDFs over target cells spanning `±width_sd` standard deviations). Marker
//! costs are integrated analytically against the transition from the previous
//! grid.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::model::{ModelParams, SubjectCovariates, VisitSchedule};
use crate::risk::{RiskKind, RiskSpec};
use crate::strategies::{logistic, StrategySpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedRegime {
    Always,
    Never,
}

fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn norm_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// `E[h(X)]` for `X ~ N(mean, sd^2)` and the per-visit marker functional of `spec`.
fn expected_marker(spec: &RiskSpec, mean: f64, sd: f64) -> f64 {
    match spec.kind {
        RiskKind::TerminalLevel | RiskKind::AdditiveMean => mean,
        RiskKind::TerminalExceedance | RiskKind::AdditiveExceedance => {
            if sd > 0.0 {
                norm_sf((spec.eta - mean) / sd)
            } else {
                f64::from(u8::from(mean > spec.eta))
            }
        }
    }
}

/// Exact risk of always or never treating.
///
/// With realized effects on `cov` the risk is conditional on them; otherwise it
/// is marginal over the population law of the effects.
pub fn closed_form_fixed_regime(
    params: &ModelParams,
    cov: &SubjectCovariates,
    schedule: &VisitSchedule,
    regime: FixedRegime,
    spec: &RiskSpec,
) -> Result<f64> {
    params.validate()?;
    spec.validate()?;
    let big_j = schedule.j();
    if big_j == 0 {
        return Err(Error::InvalidSchedule("risk needs at least one post-baseline visit".into()));
    }
    let treated = regime == FixedRegime::Always;
    let (mu0, mu1, v0, v1) = match (cov.mu0i, cov.mu1i) {
        (Some(a), Some(b)) => (a, b, 0.0, 0.0),
        _ => (params.mu0, params.mu1, params.sigma_mu0.powi(2), params.sigma_mu1.powi(2)),
    };
    let slope = mu1 + params.covariate_slope(cov);
    let t = schedule.times();
    let law = |j: usize| {
        let mean = mu0 + slope * t[j] + if treated { params.gamma_a * (t[j] - t[0]) } else { 0.0 };
        let var = params.tau.powi(2) * t[j] + v0 + v1 * t[j] * t[j];
        (mean, var.sqrt())
    };
    let norm = big_j as f64;
    let marker = if spec.is_terminal() {
        let (m, sd) = law(big_j);
        expected_marker(spec, m, sd)
    } else {
        (1..=big_j)
            .filter(|&j| spec.in_window(j, big_j))
            .map(|j| {
                let (m, sd) = law(j);
                expected_marker(spec, m, sd)
            })
            .sum::<f64>()
            / norm
    };
    let treatment = if treated { spec.omega * spec.window_len(big_j) as f64 / norm } else { 0.0 };
    Ok(marker + treatment)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridOptions {
    /// Cells on the latent-marker axis.
    pub y_points: usize,
    /// Cells on the filter-mean axis (prediction rules only).
    pub s_points: usize,
    /// Half-width of every transition kernel, in standard deviations.
    pub width_sd: f64,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self { y_points: 512, s_points: 512, width_sd: 6.0 }
    }
}

/// Uniform cells on `[lo, hi]`, optionally shifted so that `align` is a cell edge.
#[derive(Clone, Debug, PartialEq)]
struct Axis {
    lo: f64,
    h: f64,
    n: usize,
}

impl Axis {
    fn point(x: f64) -> Self {
        Self { lo: x, h: 0.0, n: 1 }
    }

    fn new(lo: f64, hi: f64, n: usize, align: Option<f64>) -> Self {
        if !(hi > lo) {
            return Self::point(lo);
        }
        let h = (hi - lo) / n as f64;
        let mut lo = lo;
        let mut n = n;
        if let Some(a) = align.filter(|a| *a > lo && *a < hi) {
            let below = ((a - lo) / h).ceil();
            lo = a - below * h;
            n = ((hi - lo) / h).ceil() as usize;
        }
        Self { lo, h, n }
    }

    fn center(&self, i: usize) -> f64 {
        if self.h == 0.0 {
            self.lo
        } else {
            self.lo + (i as f64 + 0.5) * self.h
        }
    }

    fn edge(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.h
    }

    /// Spreads `mass` of `N(mean, sd^2)` over the cells, restricted to
    /// `mean ± width * sd`. A zero `sd` puts the mass in the containing cell.
    fn spread(&self, mean: f64, sd: f64, width: f64, mut add: impl FnMut(usize, f64)) {
        if self.h == 0.0 {
            add(0, 1.0);
            return;
        }
        if sd <= 0.0 {
            let i = ((mean - self.lo) / self.h).floor();
            if i >= 0.0 && (i as usize) < self.n {
                add(i as usize, 1.0);
            }
            return;
        }
        let first = (((mean - width * sd - self.lo) / self.h).floor().max(0.0)) as usize;
        let last = ((((mean + width * sd - self.lo) / self.h).ceil()).max(0.0) as usize).min(self.n);
        if first >= last {
            return;
        }
        let mut prev = norm_cdf((self.edge(first) - mean) / sd);
        for i in first..last {
            let next = norm_cdf((self.edge(i + 1) - mean) / sd);
            let w = next - prev;
            if w > 0.0 {
                add(i, w);
            }
            prev = next;
        }
    }
}

/// Probability mass over `(y, s)` cells for one treatment branch.
#[derive(Clone, Debug, PartialEq)]
struct Branch {
    y: Axis,
    s: Axis,
    /// Row-major over `(y, s)`.
    mass: Vec<f64>,
}

impl Branch {
    fn mass_at(&self, iy: usize, is: usize) -> f64 {
        self.mass[iy * self.s.n + is]
    }

    fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Extent of the occupied `y` and `s` centers.
    fn support(&self) -> Option<(f64, f64, f64, f64)> {
        let mut out: Option<(f64, f64, f64, f64)> = None;
        for iy in 0..self.y.n {
            for is in 0..self.s.n {
                if self.mass_at(iy, is) > 0.0 {
                    let (y, s) = (self.y.center(iy), self.s.center(is));
                    out = Some(match out {
                        None => (y, y, s, s),
                        Some((a, b, c, d)) => (a.min(y), b.max(y), c.min(s), d.max(s)),
                    });
                }
            }
        }
        out
    }
}

/// How the rule's decision is represented on the grid.
#[derive(Clone, Copy, Debug)]
enum DecisionModel {
    /// Depends on the current observation and previous treatment.
    Observation,
    /// Depends on the filter mean through a per-visit threshold.
    Filter,
}

fn decision_model(strategy: &StrategySpec) -> DecisionModel {
    if strategy.needs_prediction() {
        DecisionModel::Filter
    } else {
        DecisionModel::Observation
    }
}

/// Probability of treating given latent `y`, integrating the measurement noise.
fn treat_prob_given_y(strategy: &StrategySpec, y: f64, a_prev: bool, cov: &SubjectCovariates, sigma_eps: f64) -> f64 {
    let above = |thr: f64| {
        if sigma_eps > 0.0 {
            norm_sf((thr - y) / sigma_eps)
        } else {
            f64::from(u8::from(y > thr))
        }
    };
    match *strategy {
        StrategySpec::NeverTreat => 0.0,
        StrategySpec::AlwaysTreat => 1.0,
        StrategySpec::Randomized { p } => p,
        StrategySpec::PersonalizedThreshold { beta } => above(beta),
        StrategySpec::DeterministicThreshold { beta0, beta_c } => above(beta0 + beta_c * cov.c),
        StrategySpec::LogisticStochastic { alpha0, alpha_z, alpha_c, alpha_a } => {
            let base = alpha0 + alpha_c * cov.c + if a_prev { alpha_a } else { 0.0 };
            if sigma_eps == 0.0 {
                return logistic(base + alpha_z * y);
            }
            // Trapezoid rule over ±8 SD of the measurement noise.
            const M: usize = 320;
            let h = 16.0 / M as f64;
            let mut acc = 0.0;
            for i in 0..=M {
                let u = -8.0 + h * i as f64;
                let w = if i == 0 || i == M { 0.5 } else { 1.0 };
                acc += w * (-0.5 * u * u).exp() * logistic(base + alpha_z * (y + sigma_eps * u));
            }
            acc * h / (2.0 * std::f64::consts::PI).sqrt()
        }
        StrategySpec::PredictionContainment { .. } | StrategySpec::ParamPredictionContainment { .. } => {
            unreachable!("prediction rules use the filter-mean representation")
        }
    }
}

/// Filter-mean threshold `theta`: a prediction rule treats iff `s > theta`.
fn filter_threshold(strategy: &StrategySpec, filter_var: f64, dt: f64, untreated_drift: f64, tau: f64) -> f64 {
    let (eta, kappa) = match *strategy {
        StrategySpec::PredictionContainment { eta, kappa } => (eta, kappa),
        StrategySpec::ParamPredictionContainment { eta, beta } => (eta, beta),
        _ => unreachable!("only prediction rules have a filter threshold"),
    };
    if kappa >= 1.0 {
        return f64::INFINITY;
    }
    let sd = (filter_var + tau * tau * dt).sqrt();
    let shift = eta - untreated_drift * dt;
    if sd == 0.0 {
        return shift;
    }
    if kappa <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let q = Normal::standard().inverse_cdf(1.0 - kappa);
    shift - sd * q
}

/// Joint law of the state at one visit, with the risk accumulated so far.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDensity {
    visit: usize,
    /// The decision at `visit` has been applied and branches are keyed by it.
    decided: bool,
    /// Branches keyed by treatment (index 0 untreated, 1 treated).
    branches: Vec<(bool, Branch)>,
    /// Filter variance of the marker given the observations (prediction rules).
    filter_var: f64,
    marker_sum: f64,
    treated_sum: f64,
}

/// Everything a propagation step needs besides the state.
#[derive(Clone, Copy, Debug)]
pub struct RecurrenceContext<'a> {
    pub params: &'a ModelParams,
    pub cov: &'a SubjectCovariates,
    pub schedule: &'a VisitSchedule,
    pub strategy: &'a StrategySpec,
    pub spec: &'a RiskSpec,
    pub options: GridOptions,
}

impl RecurrenceContext<'_> {
    fn effects(&self) -> Result<(f64, f64)> {
        match (self.cov.mu0i, self.cov.mu1i) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::Unsupported("the grid recurrence requires known subject effects".into())),
        }
    }

    fn drift(&self, a: bool) -> f64 {
        let (_, mu1) = self.effects().expect("checked at initialization");
        mu1 + self.params.covariate_slope(self.cov) + if a { self.params.gamma_a } else { 0.0 }
    }

    fn big_j(&self) -> usize {
        self.schedule.j()
    }

    /// Prediction horizon of the rule at visit `j`.
    fn horizon(&self, j: usize) -> f64 {
        let t = self.schedule.times();
        if j + 1 < t.len() {
            t[j + 1] - t[j]
        } else if t.len() > 1 {
            t[j] - t[j - 1]
        } else {
            1.0
        }
    }

    fn gain(&self, prior_var: f64) -> f64 {
        let r = self.params.sigma_eps.powi(2);
        if prior_var + r > 0.0 {
            prior_var / (prior_var + r)
        } else {
            0.0
        }
    }

    fn theta(&self, j: usize, filter_var: f64) -> f64 {
        filter_threshold(self.strategy, filter_var, self.horizon(j), self.drift(false), self.params.tau)
    }
}

impl GridDensity {
    /// State at the first visit, before its decision.
    pub fn initial(ctx: &RecurrenceContext<'_>) -> Result<Self> {
        ctx.params.validate()?;
        ctx.spec.validate()?;
        ctx.strategy.validate()?;
        let (mu0, _) = ctx.effects()?;
        if ctx.big_j() == 0 {
            return Err(Error::InvalidSchedule("risk needs at least one post-baseline visit".into()));
        }
        let t0 = ctx.schedule.times()[0];
        let mean = mu0 + ctx.drift(false) * t0;
        let prior_var = ctx.params.tau.powi(2) * t0;
        let sd = prior_var.sqrt();
        let w = ctx.options.width_sd;
        let y = if sd > 0.0 { Axis::new(mean - w * sd, mean + w * sd, ctx.options.y_points, None) } else { Axis::point(mean) };
        let mut y_mass = vec![0.0; y.n];
        y.spread(mean, sd, w, |i, m| y_mass[i] += m);

        let (branch, filter_var) = match decision_model(ctx.strategy) {
            DecisionModel::Observation => (Branch { y, s: Axis::point(0.0), mass: y_mass }, 0.0),
            DecisionModel::Filter => {
                let k = ctx.gain(prior_var);
                let filter_var = (1.0 - k) * prior_var;
                let noise = k * ctx.params.sigma_eps;
                let (lo, hi) = (mean + k * (y.center(0) - mean), mean + k * (y.center(y.n - 1) - mean));
                let theta = ctx.theta(0, filter_var);
                let s = if noise > 0.0 || hi > lo {
                    Axis::new(lo - w * noise, hi + w * noise, ctx.options.s_points, Some(theta))
                } else {
                    Axis::point(mean)
                };
                let mut mass = vec![0.0; y.n * s.n];
                for (iy, &my) in y_mass.iter().enumerate() {
                    let centre = mean + k * (y.center(iy) - mean);
                    s.spread(centre, noise, w, |is, m| mass[iy * s.n + is] += my * m);
                }
                (Branch { y, s, mass }, filter_var)
            }
        };
        Ok(Self { visit: 0, decided: false, branches: vec![(false, branch)], filter_var, marker_sum: 0.0, treated_sum: 0.0 })
    }

    pub fn visit(&self) -> usize {
        self.visit
    }

    pub fn total_mass(&self) -> f64 {
        self.branches.iter().map(|(_, b)| b.total()).sum()
    }

    /// Marginal law of the latent marker, as `(cell center, mass)` pairs.
    pub fn marker_marginal(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for (_, b) in &self.branches {
            for iy in 0..b.y.n {
                let m: f64 = (0..b.s.n).map(|is| b.mass_at(iy, is)).sum();
                out.push((b.y.center(iy), m));
            }
        }
        out
    }

    /// Applies the decision at the current visit.
    fn decide(&mut self, ctx: &RecurrenceContext<'_>) {
        if self.decided {
            return;
        }
        let sigma_eps = ctx.params.sigma_eps;
        let theta = match decision_model(ctx.strategy) {
            DecisionModel::Filter => Some(ctx.theta(self.visit, self.filter_var)),
            DecisionModel::Observation => None,
        };
        let mut out = Vec::with_capacity(2 * self.branches.len());
        let mut treated = 0.0;
        for (a_prev, b) in self.branches.drain(..) {
            let mut on = vec![0.0; b.mass.len()];
            let mut off = vec![0.0; b.mass.len()];
            for iy in 0..b.y.n {
                let y = b.y.center(iy);
                let p_obs = theta.is_none().then(|| treat_prob_given_y(ctx.strategy, y, a_prev, ctx.cov, sigma_eps));
                for is in 0..b.s.n {
                    let idx = iy * b.s.n + is;
                    let p = match theta {
                        Some(th) => f64::from(u8::from(b.s.center(is) > th)),
                        None => p_obs.expect("observation rule"),
                    };
                    on[idx] = b.mass[idx] * p;
                    off[idx] = b.mass[idx] - on[idx];
                }
            }
            treated += on.iter().sum::<f64>();
            out.push((true, Branch { y: b.y.clone(), s: b.s.clone(), mass: on }));
            out.push((false, Branch { y: b.y, s: b.s, mass: off }));
        }
        out.retain(|(_, b)| b.total() > 0.0);
        if ctx.spec.in_window(self.visit, ctx.big_j()) {
            self.treated_sum += treated;
        }
        self.branches = out;
        self.decided = true;
    }

    fn check_mass(&self) -> Result<()> {
        let drift = (self.total_mass() - 1.0).abs();
        if drift > 1e-4 {
            return Err(Error::Resolution(format!("probability mass drifted by {drift:.2e} at visit {}", self.visit)));
        }
        Ok(())
    }
}

/// Applies the decision at the current visit and moves the state to the next one.
pub fn propagate_recurrence(state: &GridDensity, ctx: &RecurrenceContext<'_>) -> Result<GridDensity> {
    let big_j = ctx.big_j();
    if state.visit >= big_j {
        return Err(Error::Contract("cannot propagate beyond the last visit".into()));
    }
    let mut cur = state.clone();
    cur.decide(ctx);
    let j = cur.visit;
    let dt = ctx.schedule.dt(j);
    let tau_sd = ctx.params.tau * dt.sqrt();
    let w = ctx.options.width_sd;
    let filter = matches!(decision_model(ctx.strategy), DecisionModel::Filter);
    let prior_var = cur.filter_var + tau_sd * tau_sd;
    let k = ctx.gain(prior_var);
    let filter_var = (1.0 - k) * prior_var;
    let s_noise = k * ctx.params.sigma_eps;
    let next_marker = if ctx.spec.is_terminal() { j + 1 == big_j } else { ctx.spec.in_window(j + 1, big_j) };

    let mut marker = 0.0;
    let mut branches = Vec::new();
    for a in [false, true] {
        let sources: Vec<&Branch> = cur.branches.iter().filter(|(x, _)| *x == a).map(|(_, b)| b).collect();
        if sources.is_empty() {
            continue;
        }
        let shift = ctx.drift(a) * dt;
        let supports: Vec<_> = sources.iter().filter_map(|b| b.support()).collect();
        if supports.is_empty() {
            continue;
        }
        let ylo = supports.iter().map(|s| s.0).fold(f64::INFINITY, f64::min) + shift - w * tau_sd;
        let yhi = supports.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max) + shift + w * tau_sd;
        let y_axis = Axis::new(ylo, yhi, ctx.options.y_points, None);
        let s_axis = if filter {
            let slo = supports.iter().map(|s| s.2).fold(f64::INFINITY, f64::min);
            let shi = supports.iter().map(|s| s.3).fold(f64::NEG_INFINITY, f64::max);
            let lo = (1.0 - k) * (slo + shift) + k * ylo - w * s_noise;
            let hi = (1.0 - k) * (shi + shift) + k * yhi + w * s_noise;
            Axis::new(lo, hi, ctx.options.s_points, Some(ctx.theta(j + 1, filter_var)))
        } else {
            Axis::point(0.0)
        };
        let mut mass = vec![0.0; y_axis.n * s_axis.n];
        for src in sources {
            // Latent transition, one kernel row per source marker cell.
            let mut kernel: Vec<Vec<(usize, f64)>> = Vec::with_capacity(src.y.n);
            for iy in 0..src.y.n {
                let mean = src.y.center(iy) + shift;
                let row_mass: f64 = (0..src.s.n).map(|is| src.mass_at(iy, is)).sum();
                if next_marker {
                    marker += row_mass * expected_marker(ctx.spec, mean, tau_sd);
                }
                let mut row = Vec::new();
                if row_mass > 0.0 {
                    y_axis.spread(mean, tau_sd, w, |i, m| row.push((i, m)));
                }
                kernel.push(row);
            }
            if !filter {
                for (iy, row) in kernel.iter().enumerate() {
                    let m = src.mass_at(iy, 0);
                    for &(t, p) in row {
                        mass[t] += m * p;
                    }
                }
                continue;
            }
            // Marker first, then the filter mean given the new marker.
            let mut inter = vec![0.0; y_axis.n * src.s.n];
            for (iy, row) in kernel.iter().enumerate() {
                for is in 0..src.s.n {
                    let m = src.mass_at(iy, is);
                    if m == 0.0 {
                        continue;
                    }
                    for &(t, p) in row {
                        inter[t * src.s.n + is] += m * p;
                    }
                }
            }
            for ty in 0..y_axis.n {
                let y_new = y_axis.center(ty);
                for is in 0..src.s.n {
                    let m = inter[ty * src.s.n + is];
                    if m <= 0.0 {
                        continue;
                    }
                    let centre = (1.0 - k) * (src.s.center(is) + shift) + k * y_new;
                    s_axis.spread(centre, s_noise, w, |ts, p| mass[ty * s_axis.n + ts] += m * p);
                }
            }
        }
        branches.push((a, Branch { y: y_axis, s: s_axis, mass }));
    }
    let next = GridDensity {
        visit: j + 1,
        decided: false,
        branches,
        filter_var,
        marker_sum: cur.marker_sum + marker,
        treated_sum: cur.treated_sum,
    };
    next.check_mass()?;
    Ok(next)
}

/// Risk computed from the grid recurrence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRisk {
    pub total: f64,
    pub cost_marker: f64,
    pub cost_treatment: f64,
    /// Final probability mass (1 up to discretization loss).
    pub mass: f64,
}

/// Completes the risk at the last visit: applies its decision and normalizes the
/// accumulated costs.
pub fn risk_integral(state: &GridDensity, ctx: &RecurrenceContext<'_>) -> Result<OracleRisk> {
    let big_j = ctx.big_j();
    if state.visit != big_j {
        return Err(Error::Contract(format!("state at visit {} is not at the horizon {big_j}", state.visit)));
    }
    let mut s = state.clone();
    s.decide(ctx);
    let norm = big_j as f64;
    let cost_marker = if ctx.spec.is_terminal() { s.marker_sum } else { s.marker_sum / norm };
    let cost_treatment = ctx.spec.omega * s.treated_sum / norm;
    Ok(OracleRisk { total: cost_marker + cost_treatment, cost_marker, cost_treatment, mass: s.total_mass() })
}

/// Runs the recurrence from the first to the last visit.
pub fn oracle_risk(ctx: &RecurrenceContext<'_>) -> Result<OracleRisk> {
    let mut state = GridDensity::initial(ctx)?;
    while state.visit < ctx.big_j() {
        state = propagate_recurrence(&state, ctx)?;
    }
    risk_integral(&state, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::risk::LossWindow;

    fn known() -> SubjectCovariates {
        SubjectCovariates::new(0.5, 0).with_effects(-2.0, 1.0)
    }

    fn ctx<'a>(
        params: &'a ModelParams,
        cov: &'a SubjectCovariates,
        schedule: &'a VisitSchedule,
        strategy: &'a StrategySpec,
        spec: &'a RiskSpec,
        y_points: usize,
    ) -> RecurrenceContext<'a> {
        RecurrenceContext { params, cov, schedule, strategy, spec, options: GridOptions { y_points, s_points: y_points, width_sd: 6.0 } }
    }

    #[test]
    fn never_treat_closed_form_sum() {
        let p = ModelParams::illustration();
        let s = VisitSchedule::unit(10);
        let spec = RiskSpec::additive_exceedance(1.7, 3.0, LossWindow::AllVisits);
        let r = closed_form_fixed_regime(&p, &known(), &s, FixedRegime::Never, &spec).unwrap();
        let direct: f64 = (1..=10)
            .map(|j| {
                let j = j as f64;
                1.0 - Normal::standard().cdf((1.7 - (-2.0 + 1.15 * j)) / (2.0 * j.sqrt()))
            })
            .sum::<f64>()
            / 10.0;
        assert!((r - direct).abs() < 1e-12);
        let table = RiskSpec { window: LossWindow::ExcludeFinal, ..spec };
        let r = closed_form_fixed_regime(&p, &known(), &s, FixedRegime::Never, &table).unwrap();
        assert!((r - 0.546).abs() < 0.02, "{r}");
    }

    #[test]
    fn symmetric_always_treat_case() {
        // Treated drift zero and level at eta: every term is one half.
        let p = ModelParams { gamma_c: 0.0, gamma_d: 0.0, gamma_a: -1.0, ..ModelParams::illustration() };
        let cov = SubjectCovariates::new(0.0, 0).with_effects(1.7, 1.0);
        let s = VisitSchedule::unit(5);
        let spec = RiskSpec::additive_exceedance(1.7, 0.0, LossWindow::AllVisits);
        let r = closed_form_fixed_regime(&p, &cov, &s, FixedRegime::Always, &spec).unwrap();
        assert!((r - 0.5).abs() < 1e-12);
    }

    #[test]
    fn terminal_level_is_the_mean() {
        let p = ModelParams::illustration();
        let s = VisitSchedule::unit(10);
        let r = closed_form_fixed_regime(&p, &known(), &s, FixedRegime::Never, &RiskSpec::terminal_level()).unwrap();
        assert!((r - 9.5).abs() < 1e-12);
        let r = closed_form_fixed_regime(&p, &known(), &s, FixedRegime::Always, &RiskSpec::terminal_level()).unwrap();
        assert!((r + 20.5).abs() < 1e-12);
    }

    #[test]
    fn one_step_marginal_matches_gaussian() {
        let p = ModelParams::illustration();
        let s = VisitSchedule::unit(1);
        let spec = RiskSpec::additive_exceedance(1.7, 0.0, LossWindow::AllVisits);
        let strat = StrategySpec::NeverTreat;
        let cov = known();
        let c = ctx(&p, &cov, &s, &strat, &spec, 512);
        let st = propagate_recurrence(&GridDensity::initial(&c).unwrap(), &c).unwrap();
        let marg = st.marker_marginal();
        let h = marg[1].0 - marg[0].0;
        let tv: f64 = marg
            .iter()
            .map(|&(y, m)| (m - (norm_cdf((y + h / 2.0 + 0.85) / 2.0) - norm_cdf((y - h / 2.0 + 0.85) / 2.0))).abs())
            .sum::<f64>()
            * 0.5;
        assert!(tv < 1e-4, "{tv}");
        assert!((st.total_mass() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fixed_regimes_agree_with_closed_form() {
        let p = ModelParams::illustration();
        let s = VisitSchedule::unit(3);
        for (strat, regime) in [(StrategySpec::NeverTreat, FixedRegime::Never), (StrategySpec::AlwaysTreat, FixedRegime::Always)] {
            for spec in [
                RiskSpec::additive_exceedance(1.7, 0.4, LossWindow::AllVisits),
                RiskSpec::additive_exceedance(0.3, 0.4, LossWindow::ExcludeFinal),
                RiskSpec { kind: RiskKind::TerminalLevel, eta: 0.0, omega: 0.2, window: LossWindow::AllVisits },
                RiskSpec { kind: RiskKind::AdditiveMean, eta: 0.0, omega: 0.0, window: LossWindow::AllVisits },
            ] {
                let cov = known();
                let c = ctx(&p, &cov, &s, &strat, &spec, 512);
                let grid = oracle_risk(&c).unwrap();
                let exact = closed_form_fixed_regime(&p, &known(), &s, regime, &spec).unwrap();
                assert!((grid.total - exact).abs() < 1e-3, "{strat:?} {spec:?}: {} vs {exact}", grid.total);
                assert!((grid.mass - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn refinement_reduces_error() {
        let p = ModelParams::illustration();
        let s = VisitSchedule::unit(3);
        let spec = RiskSpec { kind: RiskKind::AdditiveExceedance, eta: 1.7, omega: 0.0, window: LossWindow::AllVisits };
        let exact = closed_form_fixed_regime(&p, &known(), &s, FixedRegime::Never, &spec).unwrap();
        let err = |n| {
            let strat = StrategySpec::NeverTreat;
            let cov = known();
            let c = ctx(&p, &cov, &s, &strat, &spec, n);
            (oracle_risk(&c).unwrap().total - exact).abs()
        };
        let (coarse, fine) = (err(24), err(48));
        assert!(fine * 2.0 <= coarse, "{coarse} -> {fine}");
    }

    #[test]
    fn treatment_only_loss_under_always_treat() {
        let p = ModelParams::illustration();
        let s = VisitSchedule::unit(3);
        let spec = RiskSpec::additive_exceedance(1e9, 0.7, LossWindow::AllVisits);
        let strat = StrategySpec::AlwaysTreat;
        let cov = known();
        let r = oracle_risk(&ctx(&p, &cov, &s, &strat, &spec, 128)).unwrap();
        assert_eq!(r.cost_marker, 0.0);
        // Kernel truncation at the grid edges loses a few 1e-9 of mass.
        assert!((r.total - 0.7).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn mass_is_conserved_for_adaptive_rules() {
        let p = ModelParams::illustration();
        let s = VisitSchedule::unit(3);
        let spec = RiskSpec::additive_exceedance(1.7, 0.5, LossWindow::AllVisits);
        for strat in [
            StrategySpec::PersonalizedThreshold { beta: 0.0 },
            StrategySpec::LogisticStochastic { alpha0: -1.0, alpha_z: 1.0, alpha_c: 0.2, alpha_a: 3.0 },
            StrategySpec::PredictionContainment { eta: 1.7, kappa: 0.3 },
        ] {
            let cov = known();
            let c = ctx(&p, &cov, &s, &strat, &spec, 160);
            let mut st = GridDensity::initial(&c).unwrap();
            while st.visit() < 3 {
                st = propagate_recurrence(&st, &c).unwrap();
                assert!((st.total_mass() - 1.0).abs() < 1e-6, "{strat:?}: {}", st.total_mass());
            }
        }
    }

    #[test]
    fn unknown_effects_are_unsupported() {
        let p = ModelParams::illustration();
        let s = VisitSchedule::unit(2);
        let spec = RiskSpec::additive_exceedance(1.7, 0.5, LossWindow::AllVisits);
        let strat = StrategySpec::NeverTreat;
        let cov = SubjectCovariates::new(0.0, 0);
        assert!(matches!(oracle_risk(&ctx(&p, &cov, &s, &strat, &spec, 64)), Err(Error::Unsupported(_))));
    }
}
