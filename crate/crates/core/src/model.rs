//! The physical law of the marker: a Brownian motion with a piecewise-constant
//! drift that depends on covariates, the subject's random slope and the current
//! treatment, observed at visit times with additive Gaussian noise.
//!
//! ```text
//! dY_t = (mu1_i + gamma_c * C + gamma_d * D + gamma_a * A_t) dt + tau dB_t
//! Z_j  = Y_{t_j} + eps_j,   eps_j ~ N(0, sigma_eps^2)
//! ```
//!
//! Treatment is right-continuous and piecewise constant: the decision taken at
//! visit `t_j` holds on `[t_j, t_{j+1})`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Population-level parameters of the marker dynamics and observation noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Mean initial level.
    pub mu0: f64,
    /// Mean untreated slope.
    pub mu1: f64,
    /// Slope effect per unit of the continuous covariate.
    pub gamma_c: f64,
    /// Slope effect of the binary covariate.
    pub gamma_d: f64,
    /// Slope effect of treatment (negative for an effective treatment).
    pub gamma_a: f64,
    /// Diffusion scale, per square-root time unit.
    pub tau: f64,
    pub sigma_eps: f64,
    pub sigma_mu0: f64,
    pub sigma_mu1: f64,
}

impl ModelParams {
    /// Generating values of the simulated HIV illustration, with random-effect
    /// standard deviations of 1 (initial level) and 0.5 (slope).
    pub fn illustration() -> Self {
        Self {
            mu0: -2.0,
            mu1: 1.0,
            gamma_c: 0.3,
            gamma_d: 1.0,
            gamma_a: -3.0,
            tau: 2.0,
            sigma_eps: 0.5,
            sigma_mu0: 1.0,
            sigma_mu1: 0.5,
        }
    }

    /// Same law with the subject-level random effects switched off.
    pub fn with_known_effects(mut self) -> Self {
        self.sigma_mu0 = 0.0;
        self.sigma_mu1 = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("mu0", self.mu0),
            ("mu1", self.mu1),
            ("gamma_c", self.gamma_c),
            ("gamma_d", self.gamma_d),
            ("gamma_a", self.gamma_a),
            ("tau", self.tau),
            ("sigma_eps", self.sigma_eps),
            ("sigma_mu0", self.sigma_mu0),
            ("sigma_mu1", self.sigma_mu1),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidParams(format!("{name} is not finite")));
        }
        if self.tau <= 0.0 {
            return Err(Error::InvalidParams("tau must be positive".into()));
        }
        for (name, v) in [
            ("sigma_eps", self.sigma_eps),
            ("sigma_mu0", self.sigma_mu0),
            ("sigma_mu1", self.sigma_mu1),
        ] {
            if v < 0.0 {
                return Err(Error::InvalidParams(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }

    /// Drift contribution of the observed covariates, excluding slope and treatment.
    pub fn covariate_slope(&self, cov: &SubjectCovariates) -> f64 {
        self.gamma_c * cov.c + self.gamma_d * f64::from(cov.d)
    }
}

/// Observed covariates of one subject and, when known, the realized random effects.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubjectCovariates {
    pub c: f64,
    pub d: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu0i: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu1i: Option<f64>,
}

impl SubjectCovariates {
    pub fn new(c: f64, d: u8) -> Self {
        Self { c, d, mu0i: None, mu1i: None }
    }

    /// Attaches realized random effects.
    pub fn with_effects(mut self, mu0i: f64, mu1i: f64) -> Self {
        self.mu0i = Some(mu0i);
        self.mu1i = Some(mu1i);
        self
    }

    /// Covariates with the random effects fixed at their population means.
    pub fn known_at_population(c: f64, d: u8, params: &ModelParams) -> Self {
        Self::new(c, d).with_effects(params.mu0, params.mu1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d > 1 {
            return Err(Error::InvalidParams(format!("binary covariate d = {}", self.d)));
        }
        if !self.c.is_finite() {
            return Err(Error::InvalidParams("covariate c is not finite".into()));
        }
        Ok(())
    }

    pub fn has_known_effects(&self) -> bool {
        self.mu0i.is_some() && self.mu1i.is_some()
    }
}

/// Strictly increasing visit times `t_0 < t_1 < ... < t_J`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct VisitSchedule {
    times: Vec<f64>,
}

impl VisitSchedule {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidSchedule("no visit times".into()));
        }
        if !(times[0] >= 0.0) {
            return Err(Error::InvalidSchedule("first visit time must be >= 0".into()));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidSchedule("non-finite visit time".into()));
        }
        if let Some(w) = times.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::InvalidSchedule(format!(
                "times not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
        Ok(Self { times })
    }

    /// Unit-spaced visits `0, 1, ..., j`.
    pub fn unit(j: usize) -> Self {
        Self { times: (0..=j).map(|t| t as f64).collect() }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of post-baseline visits.
    pub fn j(&self) -> usize {
        self.times.len() - 1
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dt(&self, j: usize) -> f64 {
        self.times[j + 1] - self.times[j]
    }

    /// Schedule restricted to the first `n` visits.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        Self::new(self.times[..n.min(self.times.len())].to_vec())
    }
}

impl TryFrom<Vec<f64>> for VisitSchedule {
    type Error = Error;

    fn try_from(times: Vec<f64>) -> Result<Self> {
        Self::new(times)
    }
}

impl From<VisitSchedule> for Vec<f64> {
    fn from(s: VisitSchedule) -> Self {
        s.times
    }
}

/// One subject's latent path, observations and treatment decisions at visit times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Latent marker; `NaN` when unavailable (e.g. imported observational data).
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub a: Vec<u8>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn check_aligned(&self, schedule: &VisitSchedule) -> Result<()> {
        let n = schedule.len();
        if self.y.len() != n || self.z.len() != n || self.a.len() != n {
            return Err(Error::Alignment(format!(
                "trajectory lengths (y {}, z {}, a {}) vs {} visits",
                self.y.len(),
                self.z.len(),
                self.a.len(),
                n
            )));
        }
        if self.a.iter().any(|&a| a > 1) {
            return Err(Error::InvalidParams("treatment indicator outside {0,1}".into()));
        }
        Ok(())
    }
}

/// A univariate Gaussian law.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub var: f64,
}

impl Gaussian {
    pub fn sd(&self) -> f64 {
        self.var.max(0.0).sqrt()
    }
}

/// Slope of the marker for a subject under treatment indicator `a`.
///
/// Uses the subject's realized slope when known, the population mean otherwise.
pub fn drift(params: &ModelParams, cov: &SubjectCovariates, a: bool) -> f64 {
    let slope = cov.mu1i.unwrap_or(params.mu1);
    slope + params.covariate_slope(cov) + if a { params.gamma_a } else { 0.0 }
}

/// Exact law of `Y_{t+dt}` given `Y_t = y_now` with treatment held at `a`.
pub fn transition(
    y_now: f64,
    dt: f64,
    a: bool,
    params: &ModelParams,
    cov: &SubjectCovariates,
) -> Result<Gaussian> {
    if !(dt > 0.0) {
        return Err(Error::InvalidSchedule(format!("transition step dt = {dt}")));
    }
    Ok(Gaussian {
        mean: y_now + drift(params, cov, a) * dt,
        var: params.tau * params.tau * dt,
    })
}

/// Total treated time `sum_j a_j (t_{j+1} - t_j)` over the schedule.
pub fn cumulative_treatment(schedule: &VisitSchedule, a: &[u8]) -> Result<f64> {
    Ok(*treatment_integrals(schedule, a)?.last().expect("non-empty schedule"))
}

/// Running integrals `int_0^{t_r} A_u du` for every visit `r`.
///
/// `a` is aligned with the schedule; the decision at the last visit does not
/// contribute to any integral within the schedule.
pub fn treatment_integrals(schedule: &VisitSchedule, a: &[u8]) -> Result<Vec<f64>> {
    if a.len() != schedule.len() {
        return Err(Error::Alignment(format!(
            "{} treatment indicators for {} visits",
            a.len(),
            schedule.len()
        )));
    }
    let times = schedule.times();
    let mut out = Vec::with_capacity(times.len());
    // A starts at t_0; nothing is accumulated before the first visit.
    let mut acc = 0.0;
    out.push(acc);
    for j in 0..times.len() - 1 {
        acc += f64::from(a[j]) * (times[j + 1] - times[j]);
        out.push(acc);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(c: f64, d: u8) -> SubjectCovariates {
        SubjectCovariates::new(c, d).with_effects(-2.0, 1.0)
    }

    #[test]
    fn drift_matches_linear_expansion() {
        let p = ModelParams::illustration();
        assert!((drift(&p, &profile(0.5, 0), true) - (-1.85)).abs() < 1e-12);
        assert!((drift(&p, &profile(-0.5, 1), false) - 1.85).abs() < 1e-12);
    }

    #[test]
    fn drift_ignores_treatment_without_effect() {
        let p = ModelParams { gamma_a: 0.0, ..ModelParams::illustration() };
        let cov = profile(0.2, 1);
        assert_eq!(drift(&p, &cov, false), drift(&p, &cov, true));
    }

    #[test]
    fn drift_falls_back_to_population_slope() {
        let p = ModelParams::illustration();
        let cov = SubjectCovariates::new(0.0, 0);
        assert_eq!(drift(&p, &cov, false), p.mu1);
    }

    #[test]
    fn transition_examples() {
        let p = ModelParams::illustration();
        let g = transition(-2.0, 1.0, false, &p, &profile(0.5, 0)).unwrap();
        assert!((g.mean - (-0.85)).abs() < 1e-12);
        assert!((g.var - 4.0).abs() < 1e-12);

        let p2 = ModelParams { gamma_c: 0.0, gamma_d: 0.0, ..p };
        let g = transition(0.0, 2.0, true, &p2, &profile(0.0, 0)).unwrap();
        assert!((g.mean - (-4.0)).abs() < 1e-12);
        assert!((g.var - 8.0).abs() < 1e-12);

        let tiny = ModelParams { tau: 1e-12, ..p };
        let g = transition(-2.0, 1.0, false, &tiny, &profile(0.5, 0)).unwrap();
        assert!(g.var < 1e-20);
        assert!((g.mean - (-0.85)).abs() < 1e-12);
    }

    #[test]
    fn transition_rejects_non_positive_step() {
        let p = ModelParams::illustration();
        assert!(matches!(
            transition(0.0, 0.0, false, &p, &profile(0.0, 0)),
            Err(Error::InvalidSchedule(_))
        ));
    }

    #[test]
    fn transitions_compose() {
        let p = ModelParams::illustration();
        let cov = profile(0.3, 1);
        for a in [false, true] {
            let first = transition(1.0, 0.7, a, &p, &cov).unwrap();
            let second = transition(first.mean, 1.3, a, &p, &cov).unwrap();
            let whole = transition(1.0, 2.0, a, &p, &cov).unwrap();
            assert!((second.mean - whole.mean).abs() <= 1e-12 * whole.mean.abs().max(1.0));
            let composed_var = first.var + second.var;
            assert!((composed_var - whole.var).abs() <= 1e-12 * whole.var);
        }
    }

    #[test]
    fn cumulative_treatment_examples() {
        let s = VisitSchedule::unit(10);
        assert_eq!(cumulative_treatment(&s, &[1; 11]).unwrap(), 10.0);
        assert_eq!(cumulative_treatment(&s, &[0; 11]).unwrap(), 0.0);
        let alt: Vec<u8> = (0..11).map(|j| (j % 2 == 0) as u8).collect();
        assert_eq!(cumulative_treatment(&s, &alt).unwrap(), 5.0);
        assert!(matches!(cumulative_treatment(&s, &[1; 10]), Err(Error::Alignment(_))));
    }

    #[test]
    fn schedule_validation() {
        assert!(VisitSchedule::new(vec![0.0, 1.0, 1.0]).is_err());
        assert!(VisitSchedule::new(vec![-1.0, 1.0]).is_err());
        assert!(VisitSchedule::new(vec![]).is_err());
        let s: VisitSchedule = serde_json::from_str("[0.0, 0.5, 2.0]").unwrap();
        assert_eq!(s.j(), 2);
        assert!(serde_json::from_str::<VisitSchedule>("[1.0, 0.5]").is_err());
    }

    #[test]
    fn params_validation() {
        assert!(ModelParams::illustration().validate().is_ok());
        assert!(ModelParams { tau: 0.0, ..ModelParams::illustration() }.validate().is_err());
        assert!(ModelParams { sigma_eps: -0.1, ..ModelParams::illustration() }.validate().is_err());
        assert!(ModelParams { mu0: f64::NAN, ..ModelParams::illustration() }.validate().is_err());
    }
}
