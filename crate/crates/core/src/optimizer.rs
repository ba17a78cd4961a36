//! Threshold search over a Monte Carlo risk curve.
//!
//! The risk curve is evaluated with common random numbers, which makes it a
//! deterministic (piecewise constant) function of the threshold. It can have
//! several local minima, so every search starts with a global grid scan before
//! a golden-section refinement around the best grid point.

use std::collections::HashMap;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::risk::{LossMoments, RiskEstimate, RiskProblem};
use crate::strategies::StrategySpec;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub lo: f64,
    pub hi: f64,
    pub grid_n: usize,
    pub refine_tol: f64,
    /// Replicates per risk evaluation.
    pub k_eval: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { lo: -15.0, hi: 40.0, grid_n: 64, refine_tol: 0.05, k_eval: 2000, seed: 1 }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::InvalidParams(format!("search interval [{}, {}]", self.lo, self.hi)));
        }
        if self.grid_n < 8 {
            return Err(Error::InvalidParams("grid_n must be at least 8".into()));
        }
        if !(self.refine_tol > 0.0) {
            return Err(Error::InvalidParams("refine_tol must be positive".into()));
        }
        if self.k_eval == 0 {
            return Err(Error::InvalidParams("k_eval must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        let step = (self.hi - self.lo) / (self.grid_n - 1) as f64;
        (0..self.grid_n)
            .map(|i| if i + 1 == self.grid_n { self.hi } else { self.lo + step * i as f64 })
            .collect()
    }
}

/// Result of a threshold search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdOptimum {
    pub beta: f64,
    pub estimate: RiskEstimate,
    /// The optimum sits on the upper bound, i.e. the strategy never treats.
    pub at_upper_boundary: bool,
    pub evaluations: usize,
}

/// Lower score wins; exact ties go to the larger threshold (less treatment).
fn better(score: f64, beta: f64, best_score: f64, best_beta: f64) -> bool {
    score < best_score || (score == best_score && beta > best_beta)
}

fn argbest(points: &[(f64, f64)]) -> usize {
    let mut best = 0;
    for (i, &(b, s)) in points.iter().enumerate().skip(1) {
        if better(s, b, points[best].1, points[best].0) {
            best = i;
        }
    }
    best
}

/// Grid scan plus golden-section refinement of `score(beta)`.
///
/// Returns every `(beta, score)` evaluated, and the index of the best one.
fn grid_then_golden<F>(score: F, cfg: &SearchConfig) -> Result<(Vec<(f64, f64)>, usize)>
where
    F: Fn(f64) -> Result<f64> + Sync,
{
    cfg.validate()?;
    let grid = cfg.grid();
    let values: Vec<f64> = grid.par_iter().map(|&b| score(b)).collect::<Result<_>>()?;
    let mut points: Vec<(f64, f64)> = grid.iter().copied().zip(values).collect();
    let i = argbest(&points);
    let (mut a, mut b) = (grid[i.saturating_sub(1)], grid[(i + 1).min(grid.len() - 1)]);

    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = score(c)?;
    let mut fd = score(d)?;
    points.push((c, fc));
    points.push((d, fd));
    while b - a > cfg.refine_tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = score(c)?;
            points.push((c, fc));
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = score(d)?;
            points.push((d, fd));
        }
    }
    let best = argbest(&points);
    Ok((points, best))
}

/// Minimizes `evaluate(beta).total` over `[cfg.lo, cfg.hi]`.
///
/// `evaluate` must be deterministic in `beta` (common random numbers).
pub fn optimize_threshold<F>(evaluate: F, cfg: &SearchConfig) -> Result<ThresholdOptimum>
where
    F: Fn(f64) -> Result<RiskEstimate> + Sync,
{
    let cache: Mutex<HashMap<u64, RiskEstimate>> = Mutex::new(HashMap::new());
    let (points, best) = grid_then_golden(
        |b| {
            let e = evaluate(b)?;
            cache.lock().expect("cache lock").insert(b.to_bits(), e);
            Ok(e.total)
        },
        cfg,
    )?;
    let beta = points[best].0;
    let estimate = cache.lock().expect("cache lock")[&beta.to_bits()];
    Ok(ThresholdOptimum { beta, estimate, at_upper_boundary: beta >= cfg.hi, evaluations: points.len() })
}

/// Purely local pattern search started at `start`: moves only on strict
/// improvement, halving the step until it falls below `cfg.refine_tol`.
pub fn local_search<F>(evaluate: F, start: f64, initial_step: f64, cfg: &SearchConfig) -> Result<ThresholdOptimum>
where
    F: Fn(f64) -> Result<RiskEstimate>,
{
    cfg.validate()?;
    let mut beta = start.clamp(cfg.lo, cfg.hi);
    let mut current = evaluate(beta)?;
    let mut step = initial_step.abs().max(cfg.refine_tol);
    let mut evaluations = 1;
    while step >= cfg.refine_tol {
        let mut moved = false;
        for cand in [beta - step, beta + step] {
            if cand < cfg.lo || cand > cfg.hi {
                continue;
            }
            let e = evaluate(cand)?;
            evaluations += 1;
            if e.total < current.total {
                beta = cand;
                current = e;
                moved = true;
                break;
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    Ok(ThresholdOptimum { beta, estimate: current, at_upper_boundary: beta >= cfg.hi, evaluations })
}

/// Covariate profile `(D, C)` with realized effects at the population means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub d: u8,
    pub c: f64,
}

impl Profile {
    /// The four profiles of the illustration tables.
    pub fn illustration() -> [Profile; 4] {
        [
            Profile { d: 1, c: 0.5 },
            Profile { d: 1, c: -0.5 },
            Profile { d: 0, c: 0.5 },
            Profile { d: 0, c: -0.5 },
        ]
    }
}

/// One row of an omega sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub omega: f64,
    pub profile_d: u8,
    pub profile_c: f64,
    pub beta_star: f64,
    pub cost_y: f64,
    pub cost_trt: f64,
    pub total: f64,
    pub pct_treated: f64,
    pub mc_se: f64,
    pub at_upper_boundary: bool,
}

impl SweepRow {
    pub const CSV_HEADER: [&'static str; 9] =
        ["omega", "profile_d", "profile_c", "beta_star", "cost_y", "cost_trt", "total", "pct_treated", "mc_se"];

    pub fn csv_row(&self) -> [String; 9] {
        [
            self.omega.to_string(),
            self.profile_d.to_string(),
            self.profile_c.to_string(),
            self.beta_star.to_string(),
            self.cost_y.to_string(),
            self.cost_trt.to_string(),
            self.total.to_string(),
            self.pct_treated.to_string(),
            self.mc_se.to_string(),
        ]
    }
}

/// Optimal personalized thresholds for every `(omega, profile)`.
///
/// All weights of one profile share the same simulated replicates. The search
/// is run once per weight, every evaluated threshold is pooled, and each row
/// reports the pooled minimizer at its weight. A pooled optimum is a pointwise
/// minimum of affine functions of omega, so the optimal risk is exactly
/// nondecreasing and concave across the sweep.
pub fn sweep_omega<M>(omegas: &[f64], profiles: &[Profile], make_problem: M, cfg: &SearchConfig) -> Result<Vec<SweepRow>>
where
    M: Fn(&Profile) -> Result<RiskProblem>,
{
    if omegas.is_empty() {
        return Err(Error::InvalidParams("no omega values to sweep".into()));
    }
    if let Some(w) = omegas.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidParams(format!("omega = {w}")));
    }
    let mut rows = Vec::with_capacity(omegas.len() * profiles.len());
    for profile in profiles {
        let problem = make_problem(profile)?;
        let cache: Mutex<HashMap<u64, LossMoments>> = Mutex::new(HashMap::new());
        let moments = |b: f64| -> Result<LossMoments> {
            if let Some(m) = cache.lock().expect("cache lock").get(&b.to_bits()) {
                return Ok(*m);
            }
            let m = problem.moments(&StrategySpec::PersonalizedThreshold { beta: b })?;
            cache.lock().expect("cache lock").insert(b.to_bits(), m);
            Ok(m)
        };
        for &w in omegas {
            grid_then_golden(|b| Ok(moments(b)?.total(w)), cfg)?;
        }
        let mut pool: Vec<(f64, LossMoments)> =
            cache.into_inner().expect("cache lock").into_iter().map(|(b, m)| (f64::from_bits(b), m)).collect();
        pool.sort_by(|x, y| x.0.total_cmp(&y.0));
        for &w in omegas {
            let scored: Vec<(f64, f64)> = pool.iter().map(|(b, m)| (*b, m.total(w))).collect();
            let (beta, m) = pool[argbest(&scored)];
            let e = m.estimate(&problem.spec().with_omega(w));
            rows.push(SweepRow {
                omega: w,
                profile_d: profile.d,
                profile_c: profile.c,
                beta_star: beta,
                cost_y: e.cost_marker,
                cost_trt: e.cost_treatment,
                total: e.total,
                pct_treated: 100.0 * e.fraction_treated,
                mc_se: e.mc_se,
                at_upper_boundary: beta >= cfg.hi,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelParams, SubjectCovariates, VisitSchedule};
    use crate::risk::{LossWindow, RiskSpec};

    fn mock(f: impl Fn(f64) -> f64 + Sync) -> impl Fn(f64) -> Result<RiskEstimate> + Sync {
        move |b| {
            let v = f(b);
            Ok(RiskEstimate {
                total: v,
                cost_marker: v,
                cost_treatment: 0.0,
                fraction_treated: 0.0,
                treatment_unweighted: 0.0,
                mc_se: 0.0,
                k: 1,
                spec: RiskSpec::terminal_level(),
            })
        }
    }

    #[test]
    fn convex_mock() {
        let cfg = SearchConfig::default();
        let opt = optimize_threshold(mock(|b| (b - 1.0).powi(2)), &cfg).unwrap();
        assert!((opt.beta - 1.0).abs() < cfg.refine_tol);
        assert!(!opt.at_upper_boundary);
    }

    #[test]
    fn plateau_prefers_upper_bound() {
        let cfg = SearchConfig::default();
        let opt = optimize_threshold(mock(|b| if b > 10.0 { 0.5 } else { 1.0 }), &cfg).unwrap();
        assert_eq!(opt.beta, cfg.hi);
        assert!(opt.at_upper_boundary);
    }

    #[test]
    fn grid_finds_global_minimum_local_search_does_not() {
        // Shallow local minimum at 20, deep global minimum at -5.
        let f = |b: f64| 1.0 - 0.2 * (-(b - 20.0).powi(2)).exp() - 0.9 * (-(b + 5.0).powi(2) / 4.0).exp();
        let cfg = SearchConfig::default();
        let global = optimize_threshold(mock(f), &cfg).unwrap();
        let local = local_search(mock(f), 20.0, 1.0, &cfg).unwrap();
        assert!((global.beta + 5.0).abs() < 0.1);
        assert!((local.beta - 20.0).abs() < 0.1);
        assert!(global.estimate.total < local.estimate.total);
    }

    #[test]
    fn scaling_preserves_argmin() {
        let f = |b: f64| (b - 3.3).abs() + 0.1 * (b * 0.7).sin();
        let cfg = SearchConfig::default();
        let a = optimize_threshold(mock(f), &cfg).unwrap();
        let b = optimize_threshold(mock(move |x| 7.5 * f(x)), &cfg).unwrap();
        assert_eq!(a.beta, b.beta);
    }

    #[test]
    fn config_validation() {
        assert!(SearchConfig { grid_n: 4, ..SearchConfig::default() }.validate().is_err());
        assert!(SearchConfig { lo: 1.0, hi: 1.0, ..SearchConfig::default() }.validate().is_err());
        assert!(SearchConfig { refine_tol: 0.0, ..SearchConfig::default() }.validate().is_err());
        let g = SearchConfig::default().grid();
        assert_eq!(g.len(), 64);
        assert_eq!((g[0], g[63]), (-15.0, 40.0));
    }

    #[test]
    fn small_sweep_is_monotone_and_concave() {
        let params = ModelParams::illustration().with_known_effects();
        let schedule = VisitSchedule::unit(10);
        let spec = RiskSpec::additive_exceedance(1.7, 0.0, LossWindow::ExcludeFinal);
        let cfg = SearchConfig { k_eval: 300, grid_n: 24, refine_tol: 0.2, ..SearchConfig::default() };
        let omegas = [0.0, 0.25, 0.5, 1.0, 2.0];
        let rows = sweep_omega(
            &omegas,
            &[Profile { d: 0, c: 0.5 }],
            |p| RiskProblem::skp(&params, &SubjectCovariates::known_at_population(p.c, p.d, &params), &schedule, &spec, cfg.k_eval, cfg.seed),
            &cfg,
        )
        .unwrap();
        assert_eq!(rows.len(), omegas.len());
        assert_eq!(rows[0].cost_trt, 0.0);
        for w in rows.windows(2) {
            assert!(w[1].total >= w[0].total - 1e-12);
            assert!(w[1].cost_trt / w[1].omega.max(1e-300) <= w[0].cost_trt / w[0].omega.max(1e-300) + 1e-12 || w[0].omega == 0.0);
        }
        for w in rows.windows(3) {
            let (x0, x1, x2) = (w[0].omega, w[1].omega, w[2].omega);
            let interp = w[0].total + (w[2].total - w[0].total) * (x1 - x0) / (x2 - x0);
            assert!(w[1].total >= interp - 1e-12);
        }
    }
}
