//! Maximum likelihood estimation of the marker law from observational cohorts.
//!
//! Integrating out the random effects and the Brownian motion, the observations
//! of one subject are multivariate normal with mean
//! `mu0 + (mu1 + gamma_c C + gamma_d D) t + gamma_a int_0^t A` and covariance
//! `sigma_mu0^2 + sigma_mu1^2 t t' + tau^2 min(t, t') + sigma_eps^2 1{t = t'}`.
//! The likelihood is conditional on the observed treatment path; the
//! assignment law is never modeled.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{treatment_integrals, ModelParams};
use crate::rng::{derive_seed, stream, Stream};
use crate::simulation::Cohort;

/// Number of estimated parameters.
pub const N_PARAMS: usize = 9;

pub const PARAM_NAMES: [&str; N_PARAMS] =
    ["mu0", "mu1", "gamma_c", "gamma_d", "gamma_a", "tau", "sigma_eps", "sigma_mu0", "sigma_mu1"];

/// Index of the first variance parameter; earlier entries are fixed effects.
pub const FIRST_VARIANCE: usize = 5;

fn to_vec(p: &ModelParams) -> [f64; N_PARAMS] {
    [p.mu0, p.mu1, p.gamma_c, p.gamma_d, p.gamma_a, p.tau, p.sigma_eps, p.sigma_mu0, p.sigma_mu1]
}

fn from_vec(v: &[f64]) -> ModelParams {
    ModelParams {
        mu0: v[0],
        mu1: v[1],
        gamma_c: v[2],
        gamma_d: v[3],
        gamma_a: v[4],
        tau: v[5],
        sigma_eps: v[6],
        sigma_mu0: v[7],
        sigma_mu1: v[8],
    }
}

/// Marginal covariance of the observations at `times`.
pub fn marginal_covariance(times: &[f64], params: &ModelParams) -> DMatrix<f64> {
    let (s0, s1) = (params.sigma_mu0.powi(2), params.sigma_mu1.powi(2));
    let (tau2, eps2) = (params.tau.powi(2), params.sigma_eps.powi(2));
    DMatrix::from_fn(times.len(), times.len(), |r, c| {
        let (a, b) = (times[r], times[c]);
        s0 + s1 * (a * b) + tau2 * a.min(b) + if r == c { eps2 } else { 0.0 }
    })
}

/// One subject reduced to what the likelihood needs.
#[derive(Clone, Debug)]
struct SubjectData {
    c: f64,
    d: f64,
    z: DVector<f64>,
    treated: Vec<f64>,
}

/// Subjects grouped by visit schedule, so each group needs one factorization.
#[derive(Clone, Debug)]
struct Prepared {
    groups: Vec<(Vec<f64>, Vec<SubjectData>)>,
    n_subjects: usize,
}

impl Prepared {
    fn new(cohort: &Cohort) -> Result<Self> {
        if cohort.is_empty() {
            return Err(Error::InvalidParams("empty cohort".into()));
        }
        let mut groups: Vec<(Vec<f64>, Vec<SubjectData>)> = Vec::new();
        for s in &cohort.subjects {
            let times = s.schedule.times();
            if s.trajectory.z.len() != times.len() {
                return Err(Error::Alignment(format!("subject {} has {} observations for {} visits", s.id, s.trajectory.z.len(), times.len())));
            }
            let data = SubjectData {
                c: s.cov.c,
                d: f64::from(s.cov.d),
                z: DVector::from_column_slice(&s.trajectory.z),
                treated: treatment_integrals(&s.schedule, &s.trajectory.a)?,
            };
            match groups.iter_mut().find(|(t, _)| t.as_slice() == times) {
                Some((_, members)) => members.push(data),
                None => groups.push((times.to_vec(), vec![data])),
            }
        }
        Ok(Self { groups, n_subjects: cohort.len() })
    }

    fn mean(times: &[f64], s: &SubjectData, p: &ModelParams) -> DVector<f64> {
        let slope = p.mu1 + p.gamma_c * s.c + p.gamma_d * s.d;
        DVector::from_fn(times.len(), |r, _| p.mu0 + slope * times[r] + p.gamma_a * s.treated[r])
    }

    fn log_likelihood(&self, p: &ModelParams) -> LogLikelihood {
        let mut value = 0.0;
        for (times, members) in &self.groups {
            let Some(chol) = marginal_covariance(times, p).cholesky() else {
                return LogLikelihood { value: f64::NEG_INFINITY, degenerate: true };
            };
            let l = chol.l();
            let logdet: f64 = 2.0 * l.diagonal().iter().map(|x| x.ln()).sum::<f64>();
            let n = times.len() as f64;
            let constant = -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + logdet);
            let terms: Vec<f64> = members
                .par_iter()
                .map(|s| {
                    let resid = &s.z - Self::mean(times, s, p);
                    let x = l.solve_lower_triangular(&resid).expect("non-singular factor");
                    constant - 0.5 * x.norm_squared()
                })
                .collect();
            value += terms.iter().sum::<f64>();
        }
        if value.is_finite() {
            LogLikelihood { value, degenerate: false }
        } else {
            LogLikelihood { value: f64::NEG_INFINITY, degenerate: true }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLikelihood {
    pub value: f64,
    /// The covariance was not positive definite; `value` is `-inf`.
    pub degenerate: bool,
}

/// Log-likelihood of the cohort's observations given its treatment paths.
pub fn log_likelihood(cohort: &Cohort, params: &ModelParams) -> Result<LogLikelihood> {
    Ok(Prepared::new(cohort)?.log_likelihood(params))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Tolerance on the gradient norm of the mean log-likelihood per subject.
    pub grad_tol: f64,
    pub compute_vcov: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_iter: 500, grad_tol: 1e-6, compute_vcov: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub estimates: ModelParams,
    /// Inverse observed information, in the order of [`PARAM_NAMES`].
    pub vcov: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl FittedModel {
    /// Wald interval `estimate ± z se` for parameter `i`.
    pub fn wald_interval(&self, i: usize, z: f64) -> (f64, f64) {
        let e = to_vec(&self.estimates)[i];
        (e - z * self.se[i], e + z * self.se[i])
    }
}

/// Unconstrained parametrization: fixed effects as is, standard deviations on the log scale.
fn to_internal(p: &ModelParams) -> [f64; N_PARAMS] {
    let mut v = to_vec(p);
    for x in &mut v[FIRST_VARIANCE..] {
        *x = x.max(1e-12).ln();
    }
    v
}

fn from_internal(v: &[f64]) -> ModelParams {
    let mut w = [0.0; N_PARAMS];
    w.copy_from_slice(v);
    for x in &mut w[FIRST_VARIANCE..] {
        *x = x.exp();
    }
    from_vec(&w)
}

/// Ordinary least squares start for the fixed effects, with the residual
/// variance split evenly-ish across the variance components.
pub fn ols_init(cohort: &Cohort) -> Result<ModelParams> {
    let prep = Prepared::new(cohort)?;
    let mut xtx = DMatrix::<f64>::zeros(5, 5);
    let mut xty = DVector::<f64>::zeros(5);
    let (mut n, mut sum_t, mut sum_t2) = (0.0, 0.0, 0.0);
    for (times, members) in &prep.groups {
        for s in members {
            for (r, &t) in times.iter().enumerate() {
                let x = DVector::from_row_slice(&[1.0, t, s.c * t, s.d * t, s.treated[r]]);
                xtx += &x * x.transpose();
                xty += &x * s.z[r];
                n += 1.0;
                sum_t += t;
                sum_t2 += t * t;
            }
        }
    }
    // A tiny ridge keeps designs without treatment variation solvable.
    for i in 0..5 {
        xtx[(i, i)] += 1e-10;
    }
    let beta = xtx
        .clone()
        .cholesky()
        .ok_or_else(|| Error::DegenerateModel("least squares design is singular".into()))?
        .solve(&xty);
    let mut rss = 0.0;
    for (times, members) in &prep.groups {
        for s in members {
            for (r, &t) in times.iter().enumerate() {
                let fit = beta[0] + (beta[1] + beta[2] * s.c + beta[3] * s.d) * t + beta[4] * s.treated[r];
                rss += (s.z[r] - fit).powi(2);
            }
        }
    }
    let var = (rss / n).max(1e-12);
    let mean_t = (sum_t / n).max(1e-6);
    let mean_t2 = (sum_t2 / n).max(1e-6);
    Ok(ModelParams {
        mu0: beta[0],
        mu1: beta[1],
        gamma_c: beta[2],
        gamma_d: beta[3],
        gamma_a: beta[4],
        tau: (0.4 * var / mean_t).sqrt(),
        sigma_eps: (0.2 * var).sqrt(),
        sigma_mu0: (0.2 * var).sqrt(),
        sigma_mu1: (0.2 * var / mean_t2).sqrt(),
    })
}

fn objective(prep: &Prepared, x: &[f64]) -> f64 {
    let ll = prep.log_likelihood(&from_internal(x));
    if ll.degenerate {
        f64::INFINITY
    } else {
        -ll.value / prep.n_subjects as f64
    }
}

fn gradient(prep: &Prepared, x: &[f64; N_PARAMS]) -> [f64; N_PARAMS] {
    let mut g = [0.0; N_PARAMS];
    for i in 0..N_PARAMS {
        let h = 1e-5 * x[i].abs().max(1.0);
        let mut xp = *x;
        let mut xm = *x;
        xp[i] += h;
        xm[i] -= h;
        g[i] = (objective(prep, &xp) - objective(prep, &xm)) / (2.0 * h);
    }
    g
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Quasi-Newton (BFGS) maximization of the likelihood.
pub fn fit_ml(cohort: &Cohort, init: &ModelParams, options: &FitOptions) -> Result<FittedModel> {
    init.validate()?;
    let prep = Prepared::new(cohort)?;
    let mut x = to_internal(init);
    let mut f = objective(&prep, &x);
    if !f.is_finite() {
        return Err(Error::DegenerateModel("likelihood is not finite at the initial values".into()));
    }
    let mut g = gradient(&prep, &x);
    let mut h = DMatrix::<f64>::identity(N_PARAMS, N_PARAMS);
    let mut iterations = 0;
    let mut converged = norm(&g) < options.grad_tol;
    let mut fresh = true;
    while !converged && iterations < options.max_iter {
        iterations += 1;
        let gv = DVector::from_row_slice(&g);
        let mut p = -(&h * &gv);
        let mut slope = p.dot(&gv);
        if !(slope < 0.0) {
            h = DMatrix::identity(N_PARAMS, N_PARAMS);
            p = -gv.clone();
            slope = p.dot(&gv);
            fresh = true;
        }
        // Backtracking line search with the Armijo condition.
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let mut xn = x;
            for i in 0..N_PARAMS {
                xn[i] += alpha * p[i];
            }
            let fn_ = objective(&prep, &xn);
            if fn_.is_finite() && fn_ <= f + 1e-4 * alpha * slope {
                accepted = Some((xn, fn_));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xn, fn_)) = accepted else {
            if fresh {
                break;
            }
            h = DMatrix::identity(N_PARAMS, N_PARAMS);
            fresh = true;
            continue;
        };
        let gn = gradient(&prep, &xn);
        let s = DVector::from_fn(N_PARAMS, |i, _| xn[i] - x[i]);
        let y = DVector::from_fn(N_PARAMS, |i, _| gn[i] - g[i]);
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                h = DMatrix::identity(N_PARAMS, N_PARAMS) * (sy / y.dot(&y));
            }
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(N_PARAMS, N_PARAMS);
            let left = &i - rho * &s * y.transpose();
            let right = &i - rho * &y * s.transpose();
            h = &left * &h * &right + rho * &s * s.transpose();
            fresh = false;
        }
        x = xn;
        f = fn_;
        g = gn;
        converged = norm(&g) < options.grad_tol;
    }
    let estimates = from_internal(&x);
    let loglik = prep.log_likelihood(&estimates).value;
    let (vcov, se) = if options.compute_vcov {
        observed_vcov(&prep, &estimates)
    } else {
        (vec![vec![f64::NAN; N_PARAMS]; N_PARAMS], vec![f64::NAN; N_PARAMS])
    };
    Ok(FittedModel { estimates, vcov, se, loglik, converged, iterations, grad_norm: norm(&g) })
}

/// Inverse of the negative numerical Hessian on the natural scale.
fn observed_vcov(prep: &Prepared, est: &ModelParams) -> (Vec<Vec<f64>>, Vec<f64>) {
    let x0 = to_vec(est);
    let ll = |x: &[f64; N_PARAMS]| prep.log_likelihood(&from_vec(x)).value;
    let steps: Vec<f64> = x0.iter().map(|v| 1e-4 * v.abs().max(0.1)).collect();
    let f0 = ll(&x0);
    let mut hess = DMatrix::<f64>::zeros(N_PARAMS, N_PARAMS);
    for i in 0..N_PARAMS {
        let mut xp = x0;
        let mut xm = x0;
        xp[i] += steps[i];
        xm[i] -= steps[i];
        hess[(i, i)] = (ll(&xp) - 2.0 * f0 + ll(&xm)) / (steps[i] * steps[i]);
        for j in 0..i {
            let eval = |si: f64, sj: f64| {
                let mut x = x0;
                x[i] += si * steps[i];
                x[j] += sj * steps[j];
                ll(&x)
            };
            let v = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0)) / (4.0 * steps[i] * steps[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    let info = -hess;
    let inv = info.clone().cholesky().map(|c| c.inverse()).or_else(|| info.try_inverse());
    match inv {
        Some(m) => {
            let rows = (0..N_PARAMS).map(|i| (0..N_PARAMS).map(|j| m[(i, j)]).collect()).collect();
            let se = (0..N_PARAMS).map(|i| if m[(i, i)] >= 0.0 { m[(i, i)].sqrt() } else { f64::NAN }).collect();
            (rows, se)
        }
        None => (vec![vec![f64::NAN; N_PARAMS]; N_PARAMS], vec![f64::NAN; N_PARAMS]),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    /// Standard deviation of the refitted estimates, per parameter.
    pub se: Vec<f64>,
    pub succeeded: usize,
    /// Refits that failed or did not converge.
    pub dropped: usize,
}

/// Draws a cohort from `params` with the covariates, schedules and treatment
/// paths of `cohort`.
pub fn resample_cohort(cohort: &Cohort, params: &ModelParams, seed: u64) -> Result<Cohort> {
    let mut out = cohort.clone();
    let mut factors: Vec<(Vec<f64>, DMatrix<f64>)> = Vec::new();
    for (i, s) in out.subjects.iter_mut().enumerate() {
        let times = s.schedule.times().to_vec();
        let l = match factors.iter().find(|(t, _)| *t == times) {
            Some((_, l)) => l.clone(),
            None => {
                let l = marginal_covariance(&times, params)
                    .cholesky()
                    .ok_or_else(|| Error::DegenerateModel("marginal covariance is singular".into()))?
                    .l();
                factors.push((times.clone(), l.clone()));
                l
            }
        };
        let treated = treatment_integrals(&s.schedule, &s.trajectory.a)?;
        let slope = params.mu1 + params.covariate_slope(&s.cov);
        let mut rng = stream(seed, i as u64, Stream::Measurement);
        let e = DVector::from_fn(times.len(), |_, _| StandardNormal.sample(&mut rng));
        let noise = l * e;
        for r in 0..times.len() {
            s.trajectory.z[r] = params.mu0 + slope * times[r] + params.gamma_a * treated[r] + noise[r];
            s.trajectory.y[r] = f64::NAN;
        }
        s.cov.mu0i = None;
        s.cov.mu1i = None;
    }
    out.meta.seed = Some(seed);
    out.meta.params = Some(*params);
    Ok(out)
}

/// Parametric bootstrap standard errors from `b` refits.
pub fn bootstrap_se(cohort: &Cohort, fitted: &FittedModel, b: usize, seed: u64, options: &FitOptions) -> Result<BootstrapSummary> {
    if b < 2 {
        return Err(Error::InvalidParams("bootstrap needs at least two resamples".into()));
    }
    if !fitted.converged {
        return Err(Error::Contract("bootstrap requires a converged fit".into()));
    }
    let opts = FitOptions { compute_vcov: false, ..*options };
    let fits: Vec<Option<[f64; N_PARAMS]>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let sample = resample_cohort(cohort, &fitted.estimates, derive_seed(seed, &[r as u64])).ok()?;
            let fit = fit_ml(&sample, &fitted.estimates, &opts).ok()?;
            fit.converged.then(|| to_vec(&fit.estimates))
        })
        .collect();
    let ok: Vec<[f64; N_PARAMS]> = fits.iter().flatten().copied().collect();
    let dropped = b - ok.len();
    if ok.len() < 2 {
        return Err(Error::DegenerateModel(format!("only {} of {b} bootstrap refits succeeded", ok.len())));
    }
    let n = ok.len() as f64;
    let se = (0..N_PARAMS)
        .map(|i| {
            let m = ok.iter().map(|v| v[i]).sum::<f64>() / n;
            (ok.iter().map(|v| (v[i] - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        })
        .collect();
    Ok(BootstrapSummary { se, succeeded: ok.len(), dropped })
}

/// Estimates as a vector in the order of [`PARAM_NAMES`].
pub fn param_vector(p: &ModelParams) -> [f64; N_PARAMS] {
    to_vec(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{SubjectCovariates, Trajectory, VisitSchedule};
    use crate::simulation::{simulate_cohort, CohortMeta, CohortSubject, PopulationSpec};
    use crate::strategies::ObservationalAssignmentModel;

    #[test]
    fn covariance_examples() {
        let p = ModelParams::illustration();
        let m = marginal_covariance(&[0.0, 1.0, 2.0, 5.0], &p);
        assert!((m[(2, 3)] - 11.5).abs() < 1e-12);
        let known = p.with_known_effects();
        let m = marginal_covariance(&[1.0], &known);
        assert!((m[(0, 0)] - 4.25).abs() < 1e-12);
        let p0 = ModelParams { sigma_mu1: 0.0, ..p };
        let m = marginal_covariance(&[0.0, 1.0], &p0);
        assert!((m[(0, 0)] - 1.25).abs() < 1e-12);
    }

    fn single(z0: f64) -> Cohort {
        Cohort {
            subjects: vec![CohortSubject {
                id: 0,
                cov: SubjectCovariates::new(0.0, 0),
                schedule: VisitSchedule::unit(0),
                trajectory: Trajectory { y: vec![f64::NAN], z: vec![z0], a: vec![0] },
            }],
            meta: CohortMeta::default(),
        }
    }

    #[test]
    fn univariate_density() {
        let p = ModelParams::illustration();
        let ll = log_likelihood(&single(p.mu0), &p).unwrap();
        let expected = -0.5 * (2.0 * std::f64::consts::PI * 1.25f64).ln();
        assert!((ll.value - expected).abs() < 1e-12);
        assert!(!ll.degenerate);
    }

    #[test]
    fn degenerate_covariance_is_flagged() {
        let p = ModelParams { sigma_eps: 0.0, sigma_mu0: 0.0, ..ModelParams::illustration() };
        let ll = log_likelihood(&single(-2.0), &p).unwrap();
        assert!(ll.degenerate);
        assert_eq!(ll.value, f64::NEG_INFINITY);
    }

    #[test]
    fn permutation_invariance() {
        let pop = PopulationSpec::illustration(60);
        let c = simulate_cohort(&pop, &ObservationalAssignmentModel::illustration(), &VisitSchedule::unit(5), 3).unwrap();
        let mut rev = c.clone();
        rev.subjects.reverse();
        let p = ModelParams::illustration();
        let a = log_likelihood(&c, &p).unwrap().value;
        let b = log_likelihood(&rev, &p).unwrap().value;
        assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn truth_beats_perturbed_treatment_effect() {
        let pop = PopulationSpec::illustration(1000);
        let c = simulate_cohort(&pop, &ObservationalAssignmentModel::illustration(), &VisitSchedule::unit(10), 21).unwrap();
        let p = ModelParams::illustration();
        let off = ModelParams { gamma_a: p.gamma_a + 0.5, ..p };
        assert!(log_likelihood(&c, &p).unwrap().value > log_likelihood(&c, &off).unwrap().value);
    }

    #[test]
    fn noiseless_cohort_recovers_fixed_effects() {
        let truth = ModelParams { tau: 1e-5, sigma_eps: 1e-5, sigma_mu0: 0.0, sigma_mu1: 0.0, ..ModelParams::illustration() };
        let pop = PopulationSpec { n: 200, p_d: 0.6, params: truth };
        let c = simulate_cohort(&pop, &ObservationalAssignmentModel::illustration(), &VisitSchedule::unit(6), 5).unwrap();
        let init = ols_init(&c).unwrap();
        let fit = fit_ml(&c, &init, &FitOptions { compute_vcov: false, ..FitOptions::default() }).unwrap();
        let (e, t) = (param_vector(&fit.estimates), param_vector(&truth));
        for i in 0..FIRST_VARIANCE {
            assert!((e[i] - t[i]).abs() < 1e-4, "{}: {} vs {}", PARAM_NAMES[i], e[i], t[i]);
        }
    }

    #[test]
    fn fit_recovers_generator() {
        let pop = PopulationSpec::illustration(400);
        let c = simulate_cohort(&pop, &ObservationalAssignmentModel::illustration(), &VisitSchedule::unit(10), 8).unwrap();
        let fit = fit_ml(&c, &ols_init(&c).unwrap(), &FitOptions::default()).unwrap();
        assert!(fit.converged, "{fit:?}");
        let (e, t) = (param_vector(&fit.estimates), param_vector(&ModelParams::illustration()));
        for i in 0..N_PARAMS {
            assert!((e[i] - t[i]).abs() < 4.0 * fit.se[i] + 1e-3, "{}: {} vs {} (se {})", PARAM_NAMES[i], e[i], t[i], fit.se[i]);
        }
        for row in 0..N_PARAMS {
            for col in 0..N_PARAMS {
                assert!((fit.vcov[row][col] - fit.vcov[col][row]).abs() < 1e-9 * fit.vcov[row][row].abs().max(1e-12));
            }
        }
    }

    #[test]
    fn bootstrap_preconditions() {
        let pop = PopulationSpec::illustration(50);
        let c = simulate_cohort(&pop, &ObservationalAssignmentModel::illustration(), &VisitSchedule::unit(4), 2).unwrap();
        let fit = fit_ml(&c, &ols_init(&c).unwrap(), &FitOptions::default()).unwrap();
        assert!(bootstrap_se(&c, &fit, 1, 0, &FitOptions::default()).is_err());
        let unconverged = FittedModel { converged: false, ..fit.clone() };
        assert!(matches!(bootstrap_se(&c, &unconverged, 5, 0, &FitOptions::default()), Err(Error::Contract(_))));
        let bs = bootstrap_se(&c, &fit, 4, 0, &FitOptions::default()).unwrap();
        assert_eq!(bs.succeeded + bs.dropped, 4);
        assert!(bs.se.iter().all(|s| s.is_finite() && *s >= 0.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn covariance_is_symmetric_psd(
                mut times in prop::collection::vec(0.0f64..20.0, 1..8),
                tau in 0.01f64..3.0,
                eps in 0.0f64..2.0,
                s0 in 0.0f64..2.0,
                s1 in 0.0f64..2.0,
            ) {
                times.sort_by(f64::total_cmp);
                times.dedup();
                let p = ModelParams { tau, sigma_eps: eps, sigma_mu0: s0, sigma_mu1: s1, ..ModelParams::illustration() };
                let m = marginal_covariance(&times, &p);
                prop_assert_eq!(&m, &m.transpose());
                let eig = m.symmetric_eigen();
                let scale = eig.eigenvalues.amax().max(1.0);
                prop_assert!(eig.eigenvalues.iter().all(|v| *v >= -1e-10 * scale));
            }
        }
    }
}
