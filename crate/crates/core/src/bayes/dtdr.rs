//! Dynamic threshold decision rule: at every visit, update the posterior of the
//! subject effects, re-optimize a personalized threshold over the remaining
//! horizon by simulation from the posterior, and apply it to the current
//! observation.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{design_expansion, posterior_update, PosteriorState};
use crate::error::{Error, Result};
use crate::model::{ModelParams, SubjectCovariates, VisitSchedule};
use crate::optimizer::{optimize_threshold, SearchConfig};
use crate::risk::{loss_parts, LossMoments, LossParts, RiskEstimate, RiskSpec};
use crate::rng::{derive_seed, stream, Stream};
use crate::simulation::{NoiseBank, UnitNoise};
use crate::strategies::MarkerFilter;

/// Source of observations for an adaptive run.
pub trait Environment {
    /// Observation at the first visit.
    fn baseline(&mut self) -> Option<f64>;
    /// Applies treatment `a` until the next visit and returns its observation.
    fn step(&mut self, a: bool) -> Option<f64>;
    /// Latent marker at the visits reached so far, when known.
    fn latent(&self) -> Option<&[f64]>;
}

/// A subject simulated on the fly from known effects and the noise of one unit.
#[derive(Clone, Debug)]
pub struct SimulatedSubject {
    params: ModelParams,
    slope: f64,
    times: Vec<f64>,
    noise: UnitNoise,
    y: Vec<f64>,
}

impl SimulatedSubject {
    pub fn new(params: &ModelParams, cov: &SubjectCovariates, effects: [f64; 2], schedule: &VisitSchedule, seed: u64, unit: u64) -> Self {
        Self {
            params: *params,
            slope: effects[1] + params.covariate_slope(cov),
            times: schedule.times().to_vec(),
            noise: UnitNoise::draw(seed, unit, schedule.len()),
            y: vec![effects[0]],
        }
    }

    fn observe(&self, j: usize) -> f64 {
        self.y[j] + self.params.sigma_eps * self.noise.view().measurement[j]
    }
}

impl Environment for SimulatedSubject {
    fn baseline(&mut self) -> Option<f64> {
        let t0 = self.times[0];
        if t0 > 0.0 {
            self.y[0] += self.slope * t0 + self.params.tau * t0.sqrt() * self.noise.view().pre_baseline;
        }
        Some(self.observe(0))
    }

    fn step(&mut self, a: bool) -> Option<f64> {
        let j = self.y.len() - 1;
        if j + 1 >= self.times.len() {
            return None;
        }
        let dt = self.times[j + 1] - self.times[j];
        let d = self.slope + if a { self.params.gamma_a } else { 0.0 };
        let next = self.y[j] + d * dt + self.params.tau * dt.sqrt() * self.noise.view().diffusion[j];
        self.y.push(next);
        Some(self.observe(j + 1))
    }

    fn latent(&self) -> Option<&[f64]> {
        Some(&self.y)
    }
}

/// Replays recorded observations, ignoring the decisions.
#[derive(Clone, Debug)]
pub struct RecordedData {
    z: Vec<f64>,
    next: usize,
}

impl RecordedData {
    pub fn new(z: Vec<f64>) -> Self {
        Self { z, next: 0 }
    }

    fn pull(&mut self) -> Option<f64> {
        let v = self.z.get(self.next).copied();
        self.next += 1;
        v
    }
}

impl Environment for RecordedData {
    fn baseline(&mut self) -> Option<f64> {
        self.pull()
    }

    fn step(&mut self, _a: bool) -> Option<f64> {
        self.pull()
    }

    fn latent(&self) -> Option<&[f64]> {
        None
    }
}

/// What the per-visit simulation conditions on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HorizonModel {
    /// Whole trajectories from the first visit with effects drawn from the
    /// current posterior; only the remaining visits are scored.
    #[default]
    FromBaseline,
    /// Trajectories continued from the current filtered marker state. Each
    /// visit then performs a policy-improvement step over a fixed threshold.
    FromCurrentState,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DtdrConfig {
    pub spec: RiskSpec,
    pub search: SearchConfig,
    #[serde(default)]
    pub horizon: HorizonModel,
}

impl DtdrConfig {
    pub fn new(spec: RiskSpec, search: SearchConfig) -> Self {
        Self { spec, search, horizon: HorizonModel::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DtdrVisit {
    pub visit: usize,
    pub time: f64,
    pub beta_star: f64,
    pub decision: bool,
    pub z: f64,
    pub posterior: PosteriorState,
}

impl DtdrVisit {
    pub const CSV_HEADER: [&'static str; 10] =
        ["visit", "time", "beta_star", "decision", "z", "nu0", "nu1", "omega00", "omega01", "omega11"];

    pub fn csv_row(&self) -> [String; 10] {
        let p = &self.posterior;
        [
            self.visit.to_string(),
            self.time.to_string(),
            self.beta_star.to_string(),
            u8::from(self.decision).to_string(),
            self.z.to_string(),
            p.nu[0].to_string(),
            p.nu[1].to_string(),
            p.omega[0][0].to_string(),
            p.omega[0][1].to_string(),
            p.omega[1][1].to_string(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DtdrTrace {
    pub visits: Vec<DtdrVisit>,
    /// The environment ran out of observations before the last visit.
    pub truncated: bool,
    /// `(marker cost, weighted treatment cost)` of the realized path, when the
    /// latent marker is known and the run is complete.
    pub realized: Option<(f64, f64)>,
}

impl DtdrTrace {
    pub fn realized_total(&self) -> Option<f64> {
        self.realized.map(|(m, t)| m + t)
    }
}

/// Lower Cholesky factor of a symmetric PSD 3x3 matrix; zero pivots give zero columns.
fn psd_cholesky3(a: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let scale = a[0][0].abs().max(a[1][1].abs()).max(a[2][2].abs()).max(1e-300);
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        let d = a[i][i] - (0..i).map(|k| l[i][k] * l[i][k]).sum::<f64>();
        if d <= 1e-13 * scale {
            continue;
        }
        l[i][i] = d.sqrt();
        for r in i + 1..3 {
            l[r][i] = (a[r][i] - (0..i).map(|k| l[r][k] * l[i][k]).sum::<f64>()) / l[i][i];
        }
    }
    l
}

#[derive(Clone, Debug)]
enum Source {
    State { z_j: f64, mean: [f64; 3], chol: [[f64; 3]; 3], offset: f64 },
    Baseline { effects: PosteriorState },
}

/// Risk of the remaining horizon from visit `j` as a function of the threshold.
///
/// The objective keeps the terms of the full loss that the decision at `j` can
/// still affect (marker terms after `j`, treatment terms from `j` on),
/// normalized by the number of remaining intervals. How replicates are drawn
/// follows [`HorizonModel`]: either whole trajectories from the effects
/// posterior, or draws of `(mu0_i, mu1_i, W_{t_j})` given the observations with
/// the threshold applied to the actual `z_j`.
#[derive(Clone, Debug)]
pub struct RemainingHorizon {
    params: ModelParams,
    covariate_slope: f64,
    times: Vec<f64>,
    j: usize,
    source: Source,
    spec: RiskSpec,
    bank: NoiseBank,
}

/// Builds the remaining-horizon problem at the filter's current visit `j`.
#[allow(clippy::too_many_arguments)]
pub fn remaining_horizon_problem(
    params: &ModelParams,
    cov: &SubjectCovariates,
    schedule: &VisitSchedule,
    filter: &MarkerFilter,
    j: usize,
    z_j: f64,
    spec: &RiskSpec,
    k: usize,
    seed: u64,
) -> Result<RemainingHorizon> {
    let n = schedule.len();
    if j >= n {
        return Err(Error::Contract(format!("visit {j} beyond a schedule of {n} visits")));
    }
    let (mean, cov3) = filter.joint();
    Ok(RemainingHorizon {
        params: *params,
        covariate_slope: params.covariate_slope(cov),
        times: schedule.times().to_vec(),
        j,
        source: Source::State { z_j, mean, chol: psd_cholesky3(&cov3), offset: filter.offset() },
        spec: *spec,
        bank: NoiseBank::draw(seed, k.max(1), n - j),
    })
}

/// Builds the remaining-horizon problem at visit `j` from the effects posterior alone.
#[allow(clippy::too_many_arguments)]
pub fn posterior_horizon_problem(
    params: &ModelParams,
    cov: &SubjectCovariates,
    schedule: &VisitSchedule,
    posterior: &PosteriorState,
    j: usize,
    spec: &RiskSpec,
    k: usize,
    seed: u64,
) -> Result<RemainingHorizon> {
    posterior.validate()?;
    let n = schedule.len();
    if j >= n {
        return Err(Error::Contract(format!("visit {j} beyond a schedule of {n} visits")));
    }
    Ok(RemainingHorizon {
        params: *params,
        covariate_slope: params.covariate_slope(cov),
        times: schedule.times().to_vec(),
        j,
        source: Source::Baseline { effects: *posterior },
        spec: *spec,
        bank: NoiseBank::draw(seed, k.max(1), n),
    })
}

impl RemainingHorizon {
    fn big_j(&self) -> usize {
        self.times.len() - 1
    }

    /// Whether the threshold can still change the objective.
    pub fn is_trivial(&self) -> bool {
        let big_j = self.big_j();
        let marker = if self.spec.is_terminal() {
            self.j < big_j
        } else {
            (self.j + 1..=big_j).any(|k| self.spec.in_window(k, big_j))
        };
        let treatment = self.spec.omega > 0.0 && (self.j..=big_j).any(|k| self.spec.in_window(k, big_j));
        !(marker || treatment)
    }

    fn replicate(&self, r: usize, beta: f64) -> LossParts {
        let noise = self.bank.unit(r);
        let p = &self.params;
        let big_j = self.big_j();
        let norm = (big_j - self.j).max(1) as f64;
        // Latent marker and decision at the first simulated visit.
        let (first, mu1, mut y, mut a) = match &self.source {
            Source::State { z_j, mean, chol: l, offset } => {
                let e = [noise.effects[0], noise.effects[1], noise.pre_baseline];
                let x: Vec<f64> = (0..3).map(|i| mean[i] + (0..=i).map(|c| l[i][c] * e[c]).sum::<f64>()).collect();
                (self.j, x[1], x[0] + x[1] * self.times[self.j] + offset + x[2], *z_j > beta)
            }
            Source::Baseline { effects } => {
                let [mu0, mu1] = effects.transform(noise.effects[0], noise.effects[1]);
                let t0 = self.times[0];
                let y = mu0 + (mu1 + self.covariate_slope) * t0 + p.tau * t0.sqrt() * noise.pre_baseline;
                (0, mu1, y, y + p.sigma_eps * noise.measurement[0] > beta)
            }
        };
        let (mut marker, mut treated, mut costed) = (0.0, 0.0, 0usize);
        let mut score = |k: usize, y: f64, a: bool| {
            if !self.spec.in_window(k, big_j) {
                return;
            }
            if k > self.j && !self.spec.is_terminal() {
                marker += self.spec.marker_term(y);
            }
            if k >= self.j {
                treated += f64::from(u8::from(a));
                costed += 1;
            }
        };
        score(first, y, a);
        for k in first + 1..=big_j {
            let dt = self.times[k] - self.times[k - 1];
            let step = k - first - 1;
            let d = mu1 + self.covariate_slope + if a { p.gamma_a } else { 0.0 };
            y += d * dt + p.tau * dt.sqrt() * noise.diffusion[step];
            a = y + p.sigma_eps * noise.measurement[step + 1] > beta;
            score(k, y, a);
        }
        if self.spec.is_terminal() && self.j < big_j {
            marker = self.spec.marker_term(y) * norm;
        }
        LossParts {
            marker: marker / norm,
            treatment: treated / norm,
            fraction: if costed > 0 { treated / costed as f64 } else { 0.0 },
        }
    }

    pub fn moments(&self, beta: f64) -> LossMoments {
        let parts: Vec<LossParts> = (0..self.bank.k()).into_par_iter().map(|r| self.replicate(r, beta)).collect();
        LossMoments::from_parts(&parts)
    }

    pub fn evaluate(&self, beta: f64) -> RiskEstimate {
        self.moments(beta).estimate(&self.spec)
    }
}

/// Runs the adaptive rule against `env` over `schedule`.
///
/// `prior` is the law of the subject effects before any observation; `cov`
/// supplies the observed covariates only.
#[allow(clippy::too_many_arguments)]
pub fn dtdr_run<E: Environment + ?Sized>(
    prior: &PosteriorState,
    params: &ModelParams,
    cov: &SubjectCovariates,
    schedule: &VisitSchedule,
    config: &DtdrConfig,
    env: &mut E,
    seed: u64,
) -> Result<DtdrTrace> {
    prior.validate()?;
    params.validate()?;
    config.spec.validate()?;
    config.search.validate()?;
    let times = schedule.times();
    let n = times.len();
    let mut filter = MarkerFilter::new(params, cov, prior);
    let mut z_path = Vec::with_capacity(n);
    let mut a_path: Vec<u8> = Vec::with_capacity(n);
    let mut visits = Vec::with_capacity(n);
    let mut truncated = false;
    let mut z_next = env.baseline();
    for j in 0..n {
        let Some(z_j) = z_next else {
            truncated = true;
            break;
        };
        z_path.push(z_j);
        filter.advance(times[j], a_path.last() == Some(&1));
        filter.observe(z_j)?;
        let de = design_expansion(&times[..=j], cov, &a_path, params)?;
        let posterior = posterior_update(prior, &z_path, &de)?;

        let visit_seed = derive_seed(seed, &[j as u64]);
        let k = config.search.k_eval;
        let problem = match config.horizon {
            HorizonModel::FromBaseline => {
                posterior_horizon_problem(params, cov, schedule, &posterior, j, &config.spec, k, visit_seed)?
            }
            HorizonModel::FromCurrentState => {
                remaining_horizon_problem(params, cov, schedule, &filter, j, z_j, &config.spec, k, visit_seed)?
            }
        };
        let beta_star = if problem.is_trivial() {
            config.search.hi
        } else {
            optimize_threshold(|b| Ok(problem.evaluate(b)), &config.search)?.beta
        };
        let decision = z_j > beta_star;
        a_path.push(u8::from(decision));
        visits.push(DtdrVisit { visit: j, time: times[j], beta_star, decision, z: z_j, posterior });
        if j + 1 < n {
            z_next = env.step(decision);
        }
    }
    let realized = match env.latent() {
        Some(y) if !truncated && y.len() == n && n > 1 => {
            let p = loss_parts(y, &a_path, &config.spec);
            Some((p.marker, config.spec.omega * p.treatment))
        }
        _ => None,
    };
    Ok(DtdrTrace { visits, truncated, realized })
}

/// Draws effects from `law` for an episode, with the episode's own stream.
pub fn draw_effects(law: &PosteriorState, seed: u64, episode: u64) -> [f64; 2] {
    let mut rng = stream(seed, episode, Stream::Posterior);
    let e0: f64 = StandardNormal.sample(&mut rng);
    let e1: f64 = StandardNormal.sample(&mut rng);
    law.transform(e0, e1)
}
