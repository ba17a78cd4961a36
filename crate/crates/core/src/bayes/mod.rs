//! Conjugate Gaussian posterior over the subject-level parameters
//! `mu = (mu0_i, mu1_i)` and the adaptive threshold rule built on it.
//!
//! Given the treatment path, the observations of one subject are linear in `mu`:
//! `Z = A mu + c + W + eps` with `W + eps ~ N(0, Sigma)`, so a Gaussian prior
//! yields a Gaussian posterior.

mod dtdr;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use dtdr::{
    draw_effects, dtdr_run, posterior_horizon_problem, remaining_horizon_problem, DtdrConfig, DtdrTrace, DtdrVisit,
    Environment, HorizonModel, RecordedData, RemainingHorizon, SimulatedSubject,
};

use crate::error::{Error, Result};
use crate::model::{Gaussian, ModelParams, SubjectCovariates};

/// Gaussian law `N(nu, omega)` of `(mu0_i, mu1_i)` after `j` observations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorState {
    pub nu: [f64; 2],
    pub omega: [[f64; 2]; 2],
    pub j: usize,
}

impl PosteriorState {
    /// Population law of the random effects.
    pub fn prior(params: &ModelParams) -> Self {
        Self {
            nu: [params.mu0, params.mu1],
            omega: [[params.sigma_mu0.powi(2), 0.0], [0.0, params.sigma_mu1.powi(2)]],
            j: 0,
        }
    }

    /// Point mass at known effects.
    pub fn point(mu0i: f64, mu1i: f64) -> Self {
        Self { nu: [mu0i, mu1i], omega: [[0.0; 2]; 2], j: 0 }
    }

    /// The point mass when `cov` carries realized effects, the population law otherwise.
    pub fn for_subject(params: &ModelParams, cov: &SubjectCovariates) -> Self {
        match (cov.mu0i, cov.mu1i) {
            (Some(m0), Some(m1)) => Self::point(m0, m1),
            _ => Self::prior(params),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let o = self.omega;
        let all = [self.nu[0], self.nu[1], o[0][0], o[0][1], o[1][0], o[1][1]];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPosterior("non-finite entries".into()));
        }
        let scale = o[0][0].abs().max(o[1][1].abs()).max(1e-300);
        if (o[0][1] - o[1][0]).abs() > 1e-10 * scale {
            return Err(Error::InvalidPosterior("covariance is not symmetric".into()));
        }
        if o[0][0] < 0.0 || o[1][1] < 0.0 || self.det() < -1e-10 * scale * scale {
            return Err(Error::InvalidPosterior("covariance is not positive semi-definite".into()));
        }
        Ok(())
    }

    pub fn det(&self) -> f64 {
        self.omega[0][0] * self.omega[1][1] - self.omega[0][1] * self.omega[1][0]
    }

    /// Lower-triangular factor `L` with `L L' = omega`, tolerant of zero variances.
    pub fn cholesky(&self) -> [[f64; 2]; 2] {
        let o = self.omega;
        let l00 = o[0][0].max(0.0).sqrt();
        let l10 = if l00 > 0.0 { o[1][0] / l00 } else { 0.0 };
        let l11 = (o[1][1] - l10 * l10).max(0.0).sqrt();
        [[l00, 0.0], [l10, l11]]
    }

    /// Effects `nu + L e` for standard normal `e`.
    pub fn transform(&self, e0: f64, e1: f64) -> [f64; 2] {
        let l = self.cholesky();
        [self.nu[0] + l[0][0] * e0, self.nu[1] + l[1][0] * e0 + l[1][1] * e1]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let e0: f64 = rng.sample(StandardNormal);
        let e1: f64 = rng.sample(StandardNormal);
        self.transform(e0, e1)
    }

    fn mean(&self) -> Vector2<f64> {
        Vector2::new(self.nu[0], self.nu[1])
    }

    fn cov(&self) -> Matrix2<f64> {
        Matrix2::new(self.omega[0][0], self.omega[0][1], self.omega[1][0], self.omega[1][1])
    }

    fn from_parts(mean: &Vector2<f64>, cov: &Matrix2<f64>, j: usize) -> Self {
        let off = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
        Self {
            nu: [mean[0], mean[1]],
            omega: [[cov[(0, 0)].max(0.0), off], [off, cov[(1, 1)].max(0.0)]],
            j,
        }
    }
}

/// Linear expansion `Z = A mu + c + noise` of one subject's observations.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignExpansion {
    pub times: Vec<f64>,
    /// Rows `(1, t_r)`.
    pub a_mat: DMatrix<f64>,
    /// Known part of the mean: covariate drift and cumulative treatment effect.
    pub c_vec: DVector<f64>,
    /// `tau^2 min(t_r, t_s) + sigma_eps^2 1{r = s}`.
    pub sigma_cond: DMatrix<f64>,
    /// `int_0^{t_r} A_u du`.
    pub treated_time: Vec<f64>,
    covariate_slope: f64,
    gamma_a: f64,
    tau2: f64,
    sigma_eps2: f64,
}

/// Builds the expansion for the visits `times`, given the decisions `a` taken at
/// those visits (the decision at the last visit may be omitted).
pub fn design_expansion(
    times: &[f64],
    cov: &SubjectCovariates,
    a: &[u8],
    params: &ModelParams,
) -> Result<DesignExpansion> {
    let n = times.len();
    if a.len() + 1 != n && a.len() != n && !(n == 0 && a.is_empty()) {
        return Err(Error::Alignment(format!("{} decisions for {} visits", a.len(), n)));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) || times.first().is_some_and(|&t| t < 0.0) {
        return Err(Error::InvalidSchedule("visit times must be increasing and non-negative".into()));
    }
    let slope = params.covariate_slope(cov);
    let mut treated_time = Vec::with_capacity(n);
    let mut acc = 0.0;
    for r in 0..n {
        if r > 0 {
            acc += f64::from(a[r - 1]) * (times[r] - times[r - 1]);
        }
        treated_time.push(acc);
    }
    let a_mat = DMatrix::from_fn(n, 2, |r, c| if c == 0 { 1.0 } else { times[r] });
    let c_vec = DVector::from_fn(n, |r, _| slope * times[r] + params.gamma_a * treated_time[r]);
    let tau2 = params.tau * params.tau;
    let sigma_eps2 = params.sigma_eps * params.sigma_eps;
    let sigma_cond = DMatrix::from_fn(n, n, |r, s| {
        tau2 * times[r].min(times[s]) + if r == s { sigma_eps2 } else { 0.0 }
    });
    Ok(DesignExpansion {
        times: times.to_vec(),
        a_mat,
        c_vec,
        sigma_cond,
        treated_time,
        covariate_slope: slope,
        gamma_a: params.gamma_a,
        tau2,
        sigma_eps2,
    })
}

impl DesignExpansion {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn sigma_cholesky(&self) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        self.sigma_cond
            .clone()
            .cholesky()
            .ok_or_else(|| Error::DegenerateModel("conditional observation covariance is singular".into()))
    }

    fn check(&self, z: &[f64]) -> Result<DVector<f64>> {
        if z.len() != self.len() {
            return Err(Error::Alignment(format!("{} observations for {} design rows", z.len(), self.len())));
        }
        Ok(DVector::from_column_slice(z) - &self.c_vec)
    }
}

/// Conditions `prior` on the observations `z` described by `de`.
///
/// Uses the gain form `nu + Omega A' S^-1 (z - c - A nu)` with
/// `S = A Omega A' + Sigma`, which needs no inverse of the prior covariance and so
/// accepts degenerate (known-effect) priors.
pub fn posterior_update(prior: &PosteriorState, z: &[f64], de: &DesignExpansion) -> Result<PosteriorState> {
    prior.validate()?;
    if z.is_empty() && de.is_empty() {
        return Ok(*prior);
    }
    let resid = de.check(z)?;
    de.sigma_cholesky()?;
    let omega = prior.cov();
    let a = &de.a_mat;
    let s = a * omega * a.transpose() + &de.sigma_cond;
    let chol = s
        .cholesky()
        .ok_or_else(|| Error::DegenerateModel("innovation covariance is singular".into()))?;
    // K' = S^-1 A Omega
    let a_omega = a * omega;
    let kt = chol.solve(&a_omega);
    let innovation = resid - a * prior.mean();
    let mean = prior.mean() + kt.transpose() * innovation;
    let cov = omega - a_omega.transpose() * &kt;
    Ok(PosteriorState::from_parts(&Vector2::new(mean[0], mean[1]), &Matrix2::new(cov[(0, 0)], cov[(0, 1)], cov[(1, 0)], cov[(1, 1)]), prior.j + z.len()))
}

/// Same update in information form,
/// `Omega_post^-1 = A' Sigma^-1 A + Omega^-1`, requiring a non-singular prior.
pub fn posterior_update_precision(
    prior: &PosteriorState,
    z: &[f64],
    de: &DesignExpansion,
) -> Result<PosteriorState> {
    prior.validate()?;
    let resid = de.check(z)?;
    let prior_prec = prior
        .cov()
        .try_inverse()
        .ok_or_else(|| Error::InvalidPosterior("prior covariance is singular".into()))?;
    let chol = de.sigma_cholesky()?;
    let si_a = chol.solve(&de.a_mat);
    let si_r = chol.solve(&resid);
    let info = de.a_mat.transpose() * &si_a;
    let prec = Matrix2::new(info[(0, 0)], info[(0, 1)], info[(1, 0)], info[(1, 1)]) + prior_prec;
    let cov = prec
        .try_inverse()
        .ok_or_else(|| Error::DegenerateModel("posterior precision is singular".into()))?;
    let score = de.a_mat.transpose() * si_r;
    let mean = cov * (Vector2::new(score[0], score[1]) + prior_prec * prior.mean());
    Ok(PosteriorState::from_parts(&mean, &cov, prior.j + z.len()))
}

/// Predictive law of the next observation `Z` at `t_next`, given the posterior
/// `post` obtained from `z` and `de`, with treatment `a_now` held from the last
/// visit until `t_next`.
///
/// The Brownian component at the last visit is correlated with every past
/// observation, so the prediction conditions on `z` as well as on the effects.
pub fn posterior_predictive(
    post: &PosteriorState,
    z: &[f64],
    de: &DesignExpansion,
    a_now: bool,
    t_next: f64,
) -> Result<Gaussian> {
    let resid = de.check(z)?;
    let n = de.len();
    let t_last = *de.times.last().ok_or_else(|| Error::Contract("prediction without observations".into()))?;
    if !(t_next > t_last) {
        return Err(Error::InvalidSchedule(format!("prediction time {t_next} is not after {t_last}")));
    }
    let chol = de.sigma_cholesky()?;
    // Cov(W_{t_last}, Z_r) = tau^2 t_r
    let k = DVector::from_fn(n, |r, _| de.tau2 * de.times[r]);
    let g = chol.solve(&k);
    let v = (de.tau2 * t_last - k.dot(&g)).max(0.0);
    let ag = de.a_mat.transpose() * &g;
    let h = Vector2::new(1.0 - ag[0], t_next - ag[1]);
    let dt = t_next - t_last;
    let treated = de.treated_time[n - 1] + if a_now { dt } else { 0.0 };
    let c_next = de.covariate_slope * t_next + de.gamma_a * treated;
    let mean = h.dot(&post.mean()) + c_next + g.dot(&resid);
    let var = (h.transpose() * post.cov() * h)[(0, 0)] + v + de.tau2 * dt + de.sigma_eps2;
    Ok(Gaussian { mean, var })
}
