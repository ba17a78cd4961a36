//! Treatment-decision rules.
//!
//! A strategy maps what is observable at a visit (the observations so far, the
//! previous treatment, the covariates) to a treatment indicator for the next
//! interval. Deterministic rules never touch the random stream; stochastic rules
//! consume exactly one uniform per visit from the dedicated strategy stream.

mod filter;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use filter::{upper_tail, MarkerFilter};

use crate::bayes::PosteriorState;
use crate::error::{Error, Result};
use crate::model::{ModelParams, SubjectCovariates};

/// All supported decision rules, with a canonical JSON form tagged by `kind`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategySpec {
    NeverTreat,
    AlwaysTreat,
    /// Treat with probability `p` at every visit.
    Randomized { p: f64 },
    /// `logit P(A_j = 1) = alpha0 + alpha_z Z_j + alpha_c C + alpha_a A_{j-1}`.
    LogisticStochastic { alpha0: f64, alpha_z: f64, alpha_c: f64, alpha_a: f64 },
    /// Treat iff `Z_j > beta0 + beta_c C`.
    DeterministicThreshold { beta0: f64, beta_c: f64 },
    /// Treat iff `Z_j > beta`.
    PersonalizedThreshold { beta: f64 },
    /// Treat iff the untreated probability that the marker exceeds `eta` at the
    /// next visit is above `kappa`.
    PredictionContainment { eta: f64, kappa: f64 },
    /// Same rule with the probability threshold as the tuning parameter `beta`.
    ParamPredictionContainment { eta: f64, beta: f64 },
}

impl StrategySpec {
    pub fn validate(&self) -> Result<()> {
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParams(format!("strategy field {name} is not finite")))
            }
        };
        let probability = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidParams(format!("strategy field {name} = {v} is not a probability")))
            }
        };
        match *self {
            Self::NeverTreat | Self::AlwaysTreat => Ok(()),
            Self::Randomized { p } => probability("p", p),
            Self::LogisticStochastic { alpha0, alpha_z, alpha_c, alpha_a } => {
                finite("alpha0", alpha0)?;
                finite("alpha_z", alpha_z)?;
                finite("alpha_c", alpha_c)?;
                finite("alpha_a", alpha_a)
            }
            Self::DeterministicThreshold { beta0, beta_c } => {
                // Infinite thresholds are allowed: they encode always/never treating.
                if beta0.is_nan() || !beta_c.is_finite() {
                    return Err(Error::InvalidParams("threshold is NaN".into()));
                }
                Ok(())
            }
            Self::PersonalizedThreshold { beta } => {
                if beta.is_nan() {
                    return Err(Error::InvalidParams("threshold is NaN".into()));
                }
                Ok(())
            }
            Self::PredictionContainment { eta, kappa } => {
                finite("eta", eta)?;
                probability("kappa", kappa)
            }
            Self::ParamPredictionContainment { eta, beta } => {
                finite("eta", eta)?;
                probability("beta", beta)
            }
        }
    }

    /// Whether the rule draws randomness.
    pub fn is_stochastic(&self) -> bool {
        matches!(self, Self::Randomized { .. } | Self::LogisticStochastic { .. })
    }

    /// Whether the rule needs the predictive law of the marker.
    pub fn needs_prediction(&self) -> bool {
        matches!(
            self,
            Self::PredictionContainment { .. } | Self::ParamPredictionContainment { .. }
        )
    }

    /// Probability of treating given the current observation, the previous
    /// treatment and (for prediction rules) the filter positioned at the visit.
    ///
    /// `dt` is the prediction horizon used by prediction rules.
    pub fn treat_probability(
        &self,
        z: f64,
        a_prev: bool,
        cov: &SubjectCovariates,
        filter: Option<&MarkerFilter>,
        dt: f64,
    ) -> Result<f64> {
        let indicator = |b: bool| if b { 1.0 } else { 0.0 };
        Ok(match *self {
            Self::NeverTreat => 0.0,
            Self::AlwaysTreat => 1.0,
            Self::Randomized { p } => p,
            Self::LogisticStochastic { alpha0, alpha_z, alpha_c, alpha_a } => {
                logistic(alpha0 + alpha_z * z + alpha_c * cov.c + alpha_a * indicator(a_prev))
            }
            Self::DeterministicThreshold { beta0, beta_c } => indicator(z > beta0 + beta_c * cov.c),
            Self::PersonalizedThreshold { beta } => indicator(z > beta),
            Self::PredictionContainment { eta, kappa: threshold }
            | Self::ParamPredictionContainment { eta, beta: threshold } => {
                let f = filter.ok_or_else(|| {
                    Error::Contract("prediction rule evaluated without a marker filter".into())
                })?;
                indicator(f.exceedance(dt, eta, false) > threshold)
            }
        })
    }

    /// Decision given a pre-drawn uniform `u` (ignored by deterministic rules).
    pub(crate) fn decide_with_uniform(
        &self,
        z: f64,
        a_prev: bool,
        cov: &SubjectCovariates,
        filter: Option<&MarkerFilter>,
        dt: f64,
        u: f64,
    ) -> Result<bool> {
        let p = self.treat_probability(z, a_prev, cov, filter, dt)?;
        Ok(if self.is_stochastic() { u < p } else { p >= 1.0 })
    }
}

/// What the decision maker knows at visit `j`.
///
/// `times` and `z` cover visits `0..=j`; `a` holds the decisions taken at
/// visits `0..j`.
#[derive(Clone, Copy, Debug)]
pub struct ObservedHistory<'a> {
    pub times: &'a [f64],
    pub z: &'a [f64],
    pub a: &'a [u8],
    pub cov: SubjectCovariates,
}

impl ObservedHistory<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.z.is_empty() {
            return Err(Error::Contract("decision without any observation".into()));
        }
        if self.times.len() != self.z.len() || self.a.len() + 1 != self.z.len() {
            return Err(Error::Alignment(format!(
                "history with {} times, {} observations, {} past decisions",
                self.times.len(),
                self.z.len(),
                self.a.len()
            )));
        }
        Ok(())
    }

    pub fn a_prev(&self) -> bool {
        self.a.last().is_some_and(|&a| a == 1)
    }

    pub fn z_now(&self) -> f64 {
        *self.z.last().expect("validated history")
    }

    /// Default prediction horizon: the last visit spacing, or one time unit at baseline.
    pub fn default_horizon(&self) -> f64 {
        match self.times {
            [.., a, b] => b - a,
            _ => 1.0,
        }
    }

    /// Runs the marker filter through the whole history, starting from `effects`.
    pub fn filter(&self, params: &ModelParams, effects: &PosteriorState) -> Result<MarkerFilter> {
        self.validate()?;
        let mut f = MarkerFilter::new(params, &self.cov, effects);
        for (r, (&t, &z)) in self.times.iter().zip(self.z).enumerate() {
            let a = r > 0 && self.a[r - 1] == 1;
            f.advance(t, a);
            f.observe(z)?;
        }
        Ok(f)
    }
}

/// Applies a strategy at the last visit of `hist`.
pub fn decide<R: Rng + ?Sized>(
    spec: &StrategySpec,
    hist: &ObservedHistory<'_>,
    params: &ModelParams,
    rng: &mut R,
) -> Result<bool> {
    hist.validate()?;
    let filter = if spec.needs_prediction() {
        Some(hist.filter(params, &PosteriorState::for_subject(params, &hist.cov))?)
    } else {
        None
    };
    let u = if spec.is_stochastic() { rng.random::<f64>() } else { 0.0 };
    spec.decide_with_uniform(
        hist.z_now(),
        hist.a_prev(),
        &hist.cov,
        filter.as_ref(),
        hist.default_horizon(),
        u,
    )
}

/// `P(Y_{t_j + dt} > eta | A_{t_j} = a_hyp, history)`, by exact Gaussian
/// conditioning on every observation in the history.
///
/// Random effects that are not known on `hist.cov` are integrated over their
/// population law.
pub fn exceedance_probability(
    hist: &ObservedHistory<'_>,
    params: &ModelParams,
    dt: f64,
    eta: f64,
    a_hyp: bool,
) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(Error::InvalidSchedule(format!("prediction horizon dt = {dt}")));
    }
    let f = hist.filter(params, &PosteriorState::for_subject(params, &hist.cov))?;
    Ok(f.exceedance(dt, eta, a_hyp))
}

/// Treatment assignment law of the observational data generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationalAssignmentModel {
    pub alpha0: f64,
    pub alpha_z: f64,
    pub alpha_c: f64,
    pub alpha_d: f64,
    /// Once started, treatment is never stopped.
    #[serde(default)]
    pub absorbing: bool,
}

impl ObservationalAssignmentModel {
    /// `logit P(A = 1) = -3 + 2 Z + 0.3 C + 0.5 D`, with treatment kept once started.
    pub fn illustration() -> Self {
        Self { alpha0: -3.0, alpha_z: 2.0, alpha_c: 0.3, alpha_d: 0.5, absorbing: true }
    }

    pub fn treat_probability(&self, z: f64, cov: &SubjectCovariates) -> f64 {
        logistic(self.alpha0 + self.alpha_z * z + self.alpha_c * cov.c + self.alpha_d * f64::from(cov.d))
    }

    pub fn validate(&self) -> Result<()> {
        if [self.alpha0, self.alpha_z, self.alpha_c, self.alpha_d].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidParams("assignment coefficients must be finite".into()))
        }
    }
}

/// Draws an observational treatment decision. One uniform is consumed per call,
/// whether or not an absorbing model forces the outcome.
pub fn assign_observational<R: Rng + ?Sized>(
    model: &ObservationalAssignmentModel,
    z_j: f64,
    cov: &SubjectCovariates,
    a_prev: bool,
    rng: &mut R,
) -> bool {
    let u: f64 = rng.random();
    (model.absorbing && a_prev) || u < model.treat_probability(z_j, cov)
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
