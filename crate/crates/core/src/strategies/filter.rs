//! Exact Gaussian filtering of the latent marker from noisy visit observations.
//!
//! The state is `x = (mu0_i, mu1_i, W_t)` with `W_t = tau * B_t`, so that
//! `Y_t = mu0_i + mu1_i * t + offset(t) + W_t` where `offset` collects the known
//! covariate and treatment contributions. Observations are folded in one at a
//! time with scalar Kalman updates, which is exact joint-Gaussian conditioning
//! and tolerates zero-variance directions (known effects, no measurement noise).

use statrs::distribution::{ContinuousCDF, Normal};

use crate::bayes::PosteriorState;
use crate::error::{Error, Result};
use crate::model::{Gaussian, ModelParams, SubjectCovariates};

type Vec3 = [f64; 3];
type Mat3 = [[f64; 3]; 3];

#[derive(Clone, Debug)]
pub struct MarkerFilter {
    params: ModelParams,
    covariate_slope: f64,
    mean: Vec3,
    cov: Mat3,
    t: f64,
    offset: f64,
    observed: usize,
}

impl MarkerFilter {
    /// Filter positioned at time 0 with the given law of the random effects.
    pub fn new(params: &ModelParams, cov: &SubjectCovariates, effects: &PosteriorState) -> Self {
        let o = effects.omega;
        Self {
            params: *params,
            covariate_slope: params.covariate_slope(cov),
            mean: [effects.nu[0], effects.nu[1], 0.0],
            cov: [[o[0][0], o[0][1], 0.0], [o[1][0], o[1][1], 0.0], [0.0, 0.0, 0.0]],
            t: 0.0,
            offset: 0.0,
            observed: 0,
        }
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn observed(&self) -> usize {
        self.observed
    }

    /// Moves the filter to `t_next`, with treatment `a` held on `[t, t_next)`.
    pub fn advance(&mut self, t_next: f64, a: bool) {
        let dt = t_next - self.t;
        debug_assert!(dt >= 0.0);
        self.cov[2][2] += self.params.tau * self.params.tau * dt;
        self.offset += (self.covariate_slope + if a { self.params.gamma_a } else { 0.0 }) * dt;
        self.t = t_next;
    }

    fn design(t: f64) -> Vec3 {
        [1.0, t, 1.0]
    }

    /// Conditions on an observation `z` of the marker at the current time.
    pub fn observe(&mut self, z: f64) -> Result<()> {
        let h = Self::design(self.t);
        let ph = mat_vec(&self.cov, &h);
        let noise = self.params.sigma_eps * self.params.sigma_eps;
        let s = dot(&h, &ph) + noise;
        if !s.is_finite() || s < 0.0 {
            return Err(Error::DegenerateModel(format!("innovation variance {s}")));
        }
        self.observed += 1;
        if s <= 1e-300 {
            // The observation is a deterministic function of known quantities.
            return Ok(());
        }
        let innovation = z - dot(&h, &self.mean) - self.offset;
        let gain = [ph[0] / s, ph[1] / s, ph[2] / s];
        for i in 0..3 {
            self.mean[i] += gain[i] * innovation;
        }
        // Joseph form: (I - K h') P (I - K h')' + K R K'
        let mut ikh = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                ikh[i][j] = if i == j { 1.0 } else { 0.0 } - gain[i] * h[j];
            }
        }
        let tmp = mat_mul(&ikh, &self.cov);
        let mut next = mat_mul_t(&tmp, &ikh);
        for i in 0..3 {
            for j in 0..3 {
                next[i][j] += gain[i] * gain[j] * noise;
            }
        }
        for i in 0..3 {
            for j in 0..i {
                let v = 0.5 * (next[i][j] + next[j][i]);
                next[i][j] = v;
                next[j][i] = v;
            }
            next[i][i] = next[i][i].max(0.0);
        }
        self.cov = next;
        Ok(())
    }

    /// Law of the latent marker now.
    pub fn marker_now(&self) -> Gaussian {
        let h = Self::design(self.t);
        Gaussian {
            mean: dot(&h, &self.mean) + self.offset,
            var: dot(&h, &mat_vec(&self.cov, &h)).max(0.0),
        }
    }

    /// Predictive law of `Y_{t + dt}` if treatment `a` is held over `[t, t + dt)`.
    pub fn predict_marker(&self, dt: f64, a: bool) -> Gaussian {
        let mut ahead = self.clone();
        ahead.advance(self.t + dt, a);
        ahead.marker_now()
    }

    /// Predictive law of the next observation `Z` at `t + dt`.
    pub fn predict_observation(&self, dt: f64, a: bool) -> Gaussian {
        let g = self.predict_marker(dt, a);
        Gaussian { mean: g.mean, var: g.var + self.params.sigma_eps * self.params.sigma_eps }
    }

    /// `P(Y_{t+dt} > eta)` under treatment `a` on the next interval.
    pub fn exceedance(&self, dt: f64, eta: f64, a: bool) -> f64 {
        upper_tail(&self.predict_marker(dt, a), eta)
    }

    /// Marginal law of the random effects `(mu0_i, mu1_i)` given the observations so far.
    pub fn effects(&self) -> PosteriorState {
        PosteriorState {
            nu: [self.mean[0], self.mean[1]],
            omega: [[self.cov[0][0], self.cov[0][1]], [self.cov[1][0], self.cov[1][1]]],
            j: self.observed,
        }
    }

    /// Joint mean and covariance of `(mu0_i, mu1_i, W_t)`.
    pub fn joint(&self) -> (Vec3, Mat3) {
        (self.mean, self.cov)
    }

    /// Known-drift offset accumulated up to the current time.
    pub fn offset(&self) -> f64 {
        self.offset
    }
}

/// `P(X > eta)` for a Gaussian `X`; a point mass when the variance is zero.
pub fn upper_tail(g: &Gaussian, eta: f64) -> f64 {
    let sd = g.sd();
    if sd == 0.0 {
        return if g.mean > eta { 1.0 } else { 0.0 };
    }
    standard_normal().sf((eta - g.mean) / sd)
}

pub(super) fn standard_normal() -> Normal {
    Normal::standard()
}

fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [dot(&m[0], v), dot(&m[1], v), dot(&m[2], v)]
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// `a * b'`
fn mat_mul_t(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[j][k]).sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_effects_without_noise_recovers_latent_value() {
        let p = ModelParams { sigma_eps: 0.0, ..ModelParams::illustration() }.with_known_effects();
        let cov = SubjectCovariates::new(0.5, 0).with_effects(-2.0, 1.0);
        let mut f = MarkerFilter::new(&p, &cov, &PosteriorState::for_subject(&p, &cov));
        f.observe(-2.0).unwrap();
        f.advance(1.0, false);
        f.observe(0.4).unwrap();
        let now = f.marker_now();
        assert!((now.mean - 0.4).abs() < 1e-12);
        assert!(now.var < 1e-12);
        let next = f.predict_marker(1.0, false);
        assert!((next.mean - (0.4 + 1.15)).abs() < 1e-12);
        assert!((next.var - 4.0).abs() < 1e-12);
    }

    #[test]
    fn prior_without_observations_is_the_marginal_law() {
        let p = ModelParams::illustration();
        let cov = SubjectCovariates::new(0.0, 0);
        let mut f = MarkerFilter::new(&p, &cov, &PosteriorState::for_subject(&p, &cov));
        f.advance(2.0, false);
        let g = f.marker_now();
        assert!((g.mean - (-2.0 + 2.0)).abs() < 1e-12);
        assert!((g.var - (1.0 + 0.25 * 4.0 + 4.0 * 2.0)).abs() < 1e-12);
    }
}
