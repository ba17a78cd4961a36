//! Forward simulation of subjects under a strategy, and of observational cohorts.
//!
//! Every replicate (or subject) `r` draws its noise from the named streams of
//! unit `r`, so results depend only on `(seed, r)`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::PosteriorState;
use crate::error::{Error, Result};
use crate::model::{ModelParams, SubjectCovariates, Trajectory, VisitSchedule};
use crate::rng::{stream, Stream};
use crate::strategies::{assign_observational, MarkerFilter, ObservationalAssignmentModel, StrategySpec};

/// Standard normal and uniform draws consumed by one simulated unit with `n` visits.
///
/// Layout: two effect normals, one pre-baseline diffusion normal, `n - 1`
/// diffusion normals, `n` measurement normals, `n` strategy uniforms.
#[derive(Clone, Copy, Debug)]
pub struct NoiseView<'a> {
    pub effects: [f64; 2],
    pub pre_baseline: f64,
    pub diffusion: &'a [f64],
    pub measurement: &'a [f64],
    pub uniforms: &'a [f64],
}

fn stride(n: usize) -> usize {
    3 + (n - 1) + 2 * n
}

fn fill_unit(buf: &mut [f64], seed: u64, unit: u64, n: usize) {
    let mut re = stream(seed, unit, Stream::RandomEffects);
    buf[0] = re.sample(StandardNormal);
    buf[1] = re.sample(StandardNormal);
    buf[2] = stream(seed, unit, Stream::InitialCondition).sample(StandardNormal);
    let (diff, rest) = buf[3..].split_at_mut(n - 1);
    let (meas, unif) = rest.split_at_mut(n);
    let mut rng = stream(seed, unit, Stream::Diffusion);
    diff.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
    let mut rng = stream(seed, unit, Stream::Measurement);
    meas.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
    let mut rng = stream(seed, unit, Stream::Strategy);
    unif.iter_mut().for_each(|x| *x = rng.random::<f64>());
}

fn view(buf: &[f64], n: usize) -> NoiseView<'_> {
    let (diffusion, rest) = buf[3..].split_at(n - 1);
    let (measurement, uniforms) = rest.split_at(n);
    NoiseView { effects: [buf[0], buf[1]], pre_baseline: buf[2], diffusion, measurement, uniforms }
}

/// Noise of one unit.
#[derive(Clone, Debug)]
pub struct UnitNoise {
    n: usize,
    buf: Vec<f64>,
}

impl UnitNoise {
    pub fn draw(seed: u64, unit: u64, n: usize) -> Self {
        assert!(n >= 1, "at least one visit");
        let mut buf = vec![0.0; stride(n)];
        fill_unit(&mut buf, seed, unit, n);
        Self { n, buf }
    }

    pub fn view(&self) -> NoiseView<'_> {
        view(&self.buf, self.n)
    }
}

/// Pre-drawn noise for `k` replicates; shared by every strategy evaluated on it.
#[derive(Clone, Debug)]
pub struct NoiseBank {
    k: usize,
    n: usize,
    seed: u64,
    buf: Vec<f64>,
}

impl NoiseBank {
    pub fn draw(seed: u64, k: usize, n: usize) -> Self {
        assert!(n >= 1, "at least one visit");
        let s = stride(n);
        let mut buf = vec![0.0; s * k];
        buf.par_chunks_mut(s)
            .enumerate()
            .for_each(|(r, chunk)| fill_unit(chunk, seed, r as u64, n));
        Self { k, n, seed, buf }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn visits(&self) -> usize {
        self.n
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn unit(&self, r: usize) -> NoiseView<'_> {
        let s = stride(self.n);
        view(&self.buf[r * s..(r + 1) * s], self.n)
    }
}

/// Simulates one path given realized effects `(mu0_i, mu1_i)`.
///
/// `decide(j, z_j, a_prev, filter, dt)` returns the decision at visit `j`; the
/// filter is maintained only when `belief` is given. Outputs are written into
/// `y`, `z`, `a`, each of length `times.len()`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_path<F>(
    params: &ModelParams,
    cov: &SubjectCovariates,
    effects: [f64; 2],
    times: &[f64],
    noise: &NoiseView<'_>,
    belief: Option<&PosteriorState>,
    mut decide: F,
    y: &mut [f64],
    z: &mut [f64],
    a: &mut [u8],
) -> Result<()>
where
    F: FnMut(usize, f64, bool, Option<&MarkerFilter>, f64) -> Result<bool>,
{
    let n = times.len();
    let slope = effects[1] + params.covariate_slope(cov);
    let mut filter = belief.map(|b| MarkerFilter::new(params, cov, b));
    let t0 = times[0];
    let mut y_now = effects[0];
    if t0 > 0.0 {
        y_now += slope * t0 + params.tau * t0.sqrt() * noise.pre_baseline;
    }
    let mut a_prev = false;
    for j in 0..n {
        let z_now = y_now + params.sigma_eps * noise.measurement[j];
        y[j] = y_now;
        z[j] = z_now;
        if let Some(f) = filter.as_mut() {
            f.advance(times[j], a_prev);
            f.observe(z_now)?;
        }
        let dt = if j + 1 < n {
            times[j + 1] - times[j]
        } else if n > 1 {
            times[j] - times[j - 1]
        } else {
            1.0
        };
        let a_now = decide(j, z_now, a_prev, filter.as_ref(), dt)?;
        a[j] = u8::from(a_now);
        if j + 1 < n {
            let d = slope + if a_now { params.gamma_a } else { 0.0 };
            y_now += d * dt + params.tau * dt.sqrt() * noise.diffusion[j];
        }
        a_prev = a_now;
    }
    Ok(())
}

/// Simulates one unit under `strategy` with effects drawn from `belief`.
///
/// Prediction rules filter with the drawn effects as known when
/// `strategy_knows_effects`, and with `belief` itself otherwise.
#[allow(clippy::too_many_arguments)]
pub(crate) fn simulate_with_belief(
    params: &ModelParams,
    cov: &SubjectCovariates,
    belief: &PosteriorState,
    strategy_knows_effects: bool,
    times: &[f64],
    strategy: &StrategySpec,
    noise: &NoiseView<'_>,
    traj: &mut Trajectory,
) -> Result<()> {
    let effects = belief.transform(noise.effects[0], noise.effects[1]);
    let known = PosteriorState::point(effects[0], effects[1]);
    let filter_belief = strategy
        .needs_prediction()
        .then_some(if strategy_knows_effects { &known } else { belief });
    let Trajectory { y, z, a } = traj;
    run_path(
        params,
        cov,
        effects,
        times,
        noise,
        filter_belief,
        |j, z_j, a_prev, f, dt| strategy.decide_with_uniform(z_j, a_prev, cov, f, dt, noise.uniforms[j]),
        y,
        z,
        a,
    )
}

/// Simulates one subject under `strategy` with the noise of unit `unit`.
///
/// When `cov` carries realized effects they are used (and known to the strategy);
/// otherwise effects are drawn from the population law.
pub fn simulate_subject(
    params: &ModelParams,
    cov: &SubjectCovariates,
    schedule: &VisitSchedule,
    strategy: &StrategySpec,
    seed: u64,
    unit: u64,
) -> Result<Trajectory> {
    params.validate()?;
    cov.validate()?;
    strategy.validate()?;
    let n = schedule.len();
    let noise = UnitNoise::draw(seed, unit, n);
    let mut traj = Trajectory { y: vec![0.0; n], z: vec![0.0; n], a: vec![0; n] };
    let belief = PosteriorState::for_subject(params, cov);
    simulate_with_belief(params, cov, &belief, false, schedule.times(), strategy, &noise.view(), &mut traj)?;
    Ok(traj)
}

/// Population from which cohort subjects are drawn: `C ~ N(0, 1)`,
/// `D ~ Bernoulli(p_d)`, random effects from the population law of `params`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub n: usize,
    #[serde(default = "default_p_d")]
    pub p_d: f64,
    pub params: ModelParams,
}

fn default_p_d() -> f64 {
    0.6
}

impl PopulationSpec {
    pub fn illustration(n: usize) -> Self {
        Self { n, p_d: 0.6, params: ModelParams::illustration() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidParams("population size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p_d) {
            return Err(Error::InvalidParams(format!("p_d = {} is not a probability", self.p_d)));
        }
        self.params.validate()
    }

    /// Covariates of unit `unit`.
    pub fn draw_covariates(&self, seed: u64, unit: u64) -> SubjectCovariates {
        let mut rng = stream(seed, unit, Stream::Covariates);
        let c: f64 = rng.sample(StandardNormal);
        let d = u8::from(rng.random::<f64>() < self.p_d);
        SubjectCovariates::new(c, d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSubject {
    pub id: usize,
    /// Observed covariates; simulated cohorts also record the realized effects.
    pub cov: SubjectCovariates,
    pub schedule: VisitSchedule,
    pub trajectory: Trajectory,
}

/// Generator metadata stored alongside a cohort.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CohortMeta {
    pub seed: Option<u64>,
    pub params: Option<ModelParams>,
    pub assignment: Option<ObservationalAssignmentModel>,
    pub strategy: Option<StrategySpec>,
    pub p_d: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub subjects: Vec<CohortSubject>,
    pub meta: CohortMeta,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Fraction of follow-up time spent under treatment.
    pub fn treated_time_fraction(&self) -> f64 {
        let (mut treated, mut total) = (0.0, 0.0);
        for s in &self.subjects {
            let t = s.schedule.times();
            for j in 0..t.len() - 1 {
                let dt = t[j + 1] - t[j];
                treated += f64::from(s.trajectory.a[j]) * dt;
                total += dt;
            }
        }
        if total > 0.0 {
            treated / total
        } else {
            0.0
        }
    }
}

enum Assignment<'a> {
    Observational(&'a ObservationalAssignmentModel),
    Strategy(&'a StrategySpec),
}

fn generate_cohort(pop: &PopulationSpec, assignment: Assignment<'_>, schedule: &VisitSchedule, seed: u64) -> Result<Cohort> {
    pop.validate()?;
    let params = pop.params;
    let n = schedule.len();
    let prior = PosteriorState::prior(&params);
    let subjects: Result<Vec<CohortSubject>> = (0..pop.n)
        .into_par_iter()
        .map(|i| {
            let unit = i as u64;
            let cov = pop.draw_covariates(seed, unit);
            let noise = UnitNoise::draw(seed, unit, n);
            let nv = noise.view();
            let effects = prior.transform(nv.effects[0], nv.effects[1]);
            let mut traj = Trajectory { y: vec![0.0; n], z: vec![0.0; n], a: vec![0; n] };
            let Trajectory { y, z, a } = &mut traj;
            match assignment {
                Assignment::Observational(model) => {
                    let mut rng = stream(seed, unit, Stream::Assignment);
                    run_path(&params, &cov, effects, schedule.times(), &nv, None, |_, z_j, a_prev, _, _| {
                        Ok(assign_observational(model, z_j, &cov, a_prev, &mut rng))
                    }, y, z, a)?;
                }
                Assignment::Strategy(spec) => {
                    let belief = spec.needs_prediction().then_some(&prior);
                    run_path(&params, &cov, effects, schedule.times(), &nv, belief, |j, z_j, a_prev, f, dt| {
                        spec.decide_with_uniform(z_j, a_prev, &cov, f, dt, nv.uniforms[j])
                    }, y, z, a)?;
                }
            }
            Ok(CohortSubject {
                id: i,
                cov: cov.with_effects(effects[0], effects[1]),
                schedule: schedule.clone(),
                trajectory: traj,
            })
        })
        .collect();
    let (assignment, strategy) = match assignment {
        Assignment::Observational(m) => (Some(*m), None),
        Assignment::Strategy(s) => (None, Some(s.clone())),
    };
    Ok(Cohort {
        subjects: subjects?,
        meta: CohortMeta { seed: Some(seed), params: Some(params), assignment, strategy, p_d: Some(pop.p_d) },
    })
}

/// Observational cohort: covariates and effects from the population, treatment
/// assigned at every visit by the logistic assignment model.
pub fn simulate_cohort(
    pop: &PopulationSpec,
    assignment: &ObservationalAssignmentModel,
    schedule: &VisitSchedule,
    seed: u64,
) -> Result<Cohort> {
    assignment.validate()?;
    generate_cohort(pop, Assignment::Observational(assignment), schedule, seed)
}

/// Cohort drawn from the population with treatment decided by `strategy`.
pub fn simulate_cohort_with_strategy(
    pop: &PopulationSpec,
    strategy: &StrategySpec,
    schedule: &VisitSchedule,
    seed: u64,
) -> Result<Cohort> {
    strategy.validate()?;
    generate_cohort(pop, Assignment::Strategy(strategy), schedule, seed)
}
