//! One function per subcommand.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context};
use dyncontrol_core::bayes::{draw_effects, SimulatedSubject};
use dyncontrol_core::inference::{param_vector, BootstrapSummary, PARAM_NAMES};
use dyncontrol_core::io::{read_cohort, write_cohort, write_table_file};
use dyncontrol_core::*;
use serde::Serialize;

use crate::config::{table_omegas, ProfileSection, RiskMode, RunConfig};
use crate::output::{OutputDir, Provenance};
use crate::{Scale, Scenario, Table};

/// An estimation finished without meeting its convergence criterion.
#[derive(Debug)]
pub struct NotConverged(pub String);

impl fmt::Display for NotConverged {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "did not converge: {}", self.0)
    }
}

impl std::error::Error for NotConverged {}

pub struct Ctx<'a> {
    pub config: RunConfig,
    pub out: OutputDir,
    pub prov: Provenance,
    pub quiet: &'a bool,
}

impl Ctx<'_> {
    fn say(&self, msg: impl AsRef<str>) {
        if !*self.quiet {
            println!("{}", msg.as_ref());
        }
    }
}

fn profile_cov(config: &RunConfig, p: &ProfileSection) -> SubjectCovariates {
    match config.run.mode {
        RiskMode::Skp => SubjectCovariates::known_at_population(p.c, p.d, &config.model),
        _ => SubjectCovariates::new(p.c, p.d),
    }
}

fn risk_problem(config: &RunConfig, profile: &ProfileSection, spec: &RiskSpec, k: usize, seed: u64) -> Result<RiskProblem> {
    let schedule = config.schedule.build().map_err(|e| Error::InvalidSchedule(e.to_string()))?;
    match config.run.mode {
        RiskMode::Skp => RiskProblem::skp(&config.model, &profile_cov(config, profile), &schedule, spec, k, seed),
        RiskMode::Spdp => {
            let prior = PosteriorState::prior(&config.model);
            RiskProblem::spdp(&prior, &config.model, &profile_cov(config, profile), &schedule, spec, k, seed)
        }
        RiskMode::Marginal => RiskProblem::marginal(&config.population_spec(), &schedule, spec, k, seed),
    }
}

pub fn simulate_cohort_cmd(ctx: &Ctx, scenario: Option<Scenario>) -> anyhow::Result<()> {
    let c = &ctx.config;
    let schedule = c.schedule.build()?;
    let pop = c.population_spec();
    let strategy = match scenario {
        Some(Scenario::Never) => Some(StrategySpec::NeverTreat),
        Some(Scenario::Threshold0) => Some(StrategySpec::PersonalizedThreshold { beta: 0.0 }),
        Some(Scenario::Always) => Some(StrategySpec::AlwaysTreat),
        None => c.strategy.clone(),
    };
    let cohort = match &strategy {
        Some(s) => simulate_cohort_with_strategy(&pop, s, &schedule, c.run.seed)?,
        None => simulate_cohort(&pop, &c.population.assignment, &schedule, c.run.seed)?,
    };
    let path = ctx.out.path("cohort.csv");
    write_cohort(&path, &cohort, &ctx.prov.comments("cohort"))?;
    ctx.out.json("run.json", &ctx.prov, c, &serde_json::json!({ "subjects": cohort.len() }))?;
    ctx.say(format!(
        "wrote {} subjects to {} ({:.1}% of patient-time treated)",
        cohort.len(),
        path.display(),
        100.0 * cohort.treated_time_fraction()
    ));
    Ok(())
}

#[derive(Serialize)]
struct FitReport<'a> {
    fit: &'a FittedModel,
    bootstrap: Option<BootstrapSummary>,
}

pub fn fit_cmd(ctx: &Ctx, cohort_path: Option<&Path>) -> anyhow::Result<()> {
    let c = &ctx.config;
    let path = cohort_path
        .or(c.run.cohort.as_deref())
        .context("no cohort given: pass --cohort or set run.cohort")?;
    let cohort = read_cohort(path)?;
    let fit = fit_ml(&cohort, &ols_init(&cohort)?, &FitOptions::default())?;
    let bootstrap = if c.run.bootstrap > 0 && fit.converged {
        Some(bootstrap_se(&cohort, &fit, c.run.bootstrap, c.run.seed, &FitOptions::default())?)
    } else {
        None
    };
    let out = ctx.out.json("fit.json", &ctx.prov, c, &FitReport { fit: &fit, bootstrap: bootstrap.clone() })?;
    let est = param_vector(&fit.estimates);
    ctx.say(format!("{:<10} {:>10} {:>10}", "parameter", "estimate", "se"));
    for i in 0..PARAM_NAMES.len() {
        ctx.say(format!("{:<10} {:>10.4} {:>10.4}", PARAM_NAMES[i], est[i], fit.se[i]));
    }
    ctx.say(format!("log-likelihood {:.3}; {} iterations; wrote {}", fit.loglik, fit.iterations, out.display()));
    if !fit.converged {
        return Err(NotConverged(format!("gradient norm {:.2e} after {} iterations", fit.grad_norm, fit.iterations)).into());
    }
    Ok(())
}

pub fn risk_cmd(ctx: &Ctx) -> anyhow::Result<()> {
    let c = &ctx.config;
    let strategy = c.strategy.clone().context("`risk` needs a strategy section")?;
    let est = risk_problem(c, &c.run.profile, &c.risk, c.run.k, c.run.seed)?.evaluate(&strategy)?;
    let path = ctx.out.path("risk.csv");
    write_table_file(&path, &ctx.prov.comments("risk"), &RiskEstimate::CSV_HEADER, [est.csv_row()])?;
    ctx.out.json("run.json", &ctx.prov, c, &est)?;
    ctx.say(format!(
        "risk {:.5} (se {:.5}): marker {:.5}, treatment {:.5}, {:.1}% treated",
        est.total,
        est.mc_se,
        est.cost_marker,
        est.cost_treatment,
        100.0 * est.fraction_treated
    ));
    Ok(())
}

fn profiles(c: &RunConfig) -> Vec<Profile> {
    if c.run.profiles.is_empty() {
        Profile::illustration().to_vec()
    } else {
        c.run.profiles.iter().map(|p| Profile { d: p.d, c: p.c }).collect()
    }
}

fn sweep(c: &RunConfig, omegas: &[f64], profiles: &[Profile]) -> anyhow::Result<Vec<SweepRow>> {
    if c.run.mode == RiskMode::Marginal {
        bail!("threshold sweeps are per profile; use mode skp or spdp");
    }
    let spec = c.risk.with_omega(0.0);
    let cfg = SearchConfig { seed: c.run.seed, ..c.search };
    Ok(sweep_omega(
        omegas,
        profiles,
        |p| risk_problem(c, &ProfileSection { d: p.d, c: p.c }, &spec, cfg.k_eval, cfg.seed),
        &cfg,
    )?)
}

pub fn optimize_cmd(ctx: &Ctx) -> anyhow::Result<()> {
    let c = &ctx.config;
    let rows = sweep(c, &c.run.omegas, &profiles(c))?;
    let path = ctx.out.path("sweep.csv");
    write_table_file(&path, &ctx.prov.comments("sweep"), &SweepRow::CSV_HEADER, rows.iter().map(|r| r.csv_row()))?;
    ctx.out.json("run.json", &ctx.prov, c, &rows)?;
    for r in &rows {
        ctx.say(format!(
            "omega {:>5.2}  D={} C={:+.1}  beta* {:>8.3}{}  total {:.4}  treated {:5.1}%",
            r.omega,
            r.profile_d,
            r.profile_c,
            r.beta_star,
            if r.at_upper_boundary { " (never treat)" } else { "" },
            r.total,
            r.pct_treated
        ));
    }
    ctx.say(format!("wrote {}", path.display()));
    Ok(())
}

#[derive(Serialize)]
struct DtdrSummary {
    effects: [f64; 2],
    truncated: bool,
    realized_total: Option<f64>,
    visits: usize,
}

pub fn dtdr_cmd(ctx: &Ctx) -> anyhow::Result<()> {
    let c = &ctx.config;
    let schedule = c.schedule.build()?;
    let cov = SubjectCovariates::new(c.run.profile.c, c.run.profile.d);
    let prior = match c.run.mode {
        RiskMode::Skp => PosteriorState::point(c.model.mu0, c.model.mu1),
        _ => PosteriorState::prior(&c.model),
    };
    let effects = c.run.effects.unwrap_or_else(|| draw_effects(&prior, c.run.seed, 0));
    let mut env = SimulatedSubject::new(&c.model, &cov, effects, &schedule, c.run.seed, 0);
    let config = DtdrConfig { spec: c.risk, search: c.search, horizon: c.run.dtdr_horizon };
    let trace = dtdr_run(&prior, &c.model, &cov, &schedule, &config, &mut env, c.run.seed)?;
    let path = ctx.out.path("trace.csv");
    write_table_file(&path, &ctx.prov.comments("trace"), &DtdrVisit::CSV_HEADER, trace.visits.iter().map(|v| v.csv_row()))?;
    let summary = DtdrSummary { effects, truncated: trace.truncated, realized_total: trace.realized_total(), visits: trace.visits.len() };
    ctx.out.json("run.json", &ctx.prov, c, &summary)?;
    for v in &trace.visits {
        ctx.say(format!("visit {:>2}  z {:>8.3}  beta* {:>8.3}  treat {}", v.visit, v.z, v.beta_star, u8::from(v.decision)));
    }
    if let Some(r) = summary.realized_total {
        ctx.say(format!("realized loss {r:.4}"));
    }
    ctx.say(format!("wrote {}", path.display()));
    Ok(())
}

#[derive(Serialize)]
struct OracleEntry {
    strategy: String,
    method: &'static str,
    monte_carlo: f64,
    mc_se: f64,
    reference: f64,
    abs_diff: f64,
    within_3se: bool,
    /// Probability mass retained by the grid (1 for closed forms).
    mass: f64,
}

pub fn oracle_check_cmd(ctx: &Ctx) -> anyhow::Result<()> {
    let c = &ctx.config;
    let schedule = c.schedule.build()?;
    let cov = SubjectCovariates::known_at_population(c.run.profile.c, c.run.profile.d, &c.model);
    let problem = RiskProblem::skp(&c.model, &cov, &schedule, &c.risk, c.run.k, c.run.seed)?;
    let mut entries = Vec::new();
    let mut push = |strategy: String, method, est: RiskEstimate, reference: f64, mass: f64| {
        let abs_diff = (est.total - reference).abs();
        entries.push(OracleEntry {
            strategy,
            method,
            monte_carlo: est.total,
            mc_se: est.mc_se,
            reference,
            abs_diff,
            within_3se: abs_diff <= 3.0 * est.mc_se,
            mass,
        });
    };
    for (regime, strategy) in [(FixedRegime::Always, StrategySpec::AlwaysTreat), (FixedRegime::Never, StrategySpec::NeverTreat)] {
        let exact = closed_form_fixed_regime(&c.model, &cov, &schedule, regime, &c.risk)?;
        push(format!("{regime:?}"), "closed_form", problem.evaluate(&strategy)?, exact, 1.0);
    }
    if schedule.j() <= 3 {
        for &beta in &c.run.oracle_thresholds {
            let strategy = StrategySpec::PersonalizedThreshold { beta };
            let rc = RecurrenceContext {
                params: &c.model,
                cov: &cov,
                schedule: &schedule,
                strategy: &strategy,
                spec: &c.risk,
                options: GridOptions::default(),
            };
            let q = oracle_risk(&rc)?;
            push(format!("threshold {beta}"), "quadrature", problem.evaluate(&strategy)?, q.total, q.mass);
        }
    } else {
        ctx.say(format!("skipping adaptive rules: quadrature is limited to J <= 3 (J = {})", schedule.j()));
    }
    ctx.out.json("report.json", &ctx.prov, c, &entries)?;
    for e in &entries {
        ctx.say(format!(
            "{:<16} MC {:.5} (se {:.5})  {} {:.5}  |diff| {:.5}  {}",
            e.strategy,
            e.monte_carlo,
            e.mc_se,
            e.method,
            e.reference,
            e.abs_diff,
            if e.within_3se { "ok" } else { "MISMATCH" }
        ));
    }
    Ok(())
}

pub fn replicate_cmd(ctx: &Ctx, table: Table, scale: Scale) -> anyhow::Result<()> {
    match table {
        Table::One => replicate_estimation(ctx, scale),
        Table::Two => replicate_optimization(ctx, scale, RiskMode::Skp, "table2.csv"),
        Table::Three => replicate_optimization(ctx, scale, RiskMode::Spdp, "table3.csv"),
    }
}

fn replicate_estimation(ctx: &Ctx, scale: Scale) -> anyhow::Result<()> {
    let c = &ctx.config;
    let (reps, n) = match scale {
        Scale::Desk => (200usize, 500usize),
        Scale::Full => {
            ctx.say("full scale: 1000 fits of N=1000 subjects, roughly 10x the desk runtime");
            (1000, 1000)
        }
    };
    let pop = dyncontrol_core::PopulationSpec { n, ..c.population_spec() };
    let schedule = c.schedule.build()?;
    let start = Instant::now();
    let fits: Vec<FittedModel> = (0..reps as u64)
        .map(|r| -> anyhow::Result<FittedModel> {
            let cohort = simulate_cohort(&pop, &c.population.assignment, &schedule, derive_seed(c.run.seed, &[r]))?;
            Ok(fit_ml(&cohort, &ols_init(&cohort)?, &FitOptions::default())?)
        })
        .collect::<anyhow::Result<_>>()?;
    let truth = param_vector(&c.model);
    let m = fits.len() as f64;
    let header = ["parameter", "true", "mean", "bias", "sd", "mean_se", "coverage"];
    let rows: Vec<Vec<String>> = (0..PARAM_NAMES.len())
        .map(|i| {
            let est: Vec<f64> = fits.iter().map(|f| param_vector(&f.estimates)[i]).collect();
            let mean = est.iter().sum::<f64>() / m;
            let sd = (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
            let mean_se = fits.iter().map(|f| f.se[i]).sum::<f64>() / m;
            let cover = fits
                .iter()
                .filter(|f| {
                    let (lo, hi) = f.wald_interval(i, 1.959_963_984_540_054);
                    lo <= truth[i] && truth[i] <= hi
                })
                .count() as f64
                / m;
            vec![
                PARAM_NAMES[i].to_string(),
                truth[i].to_string(),
                format!("{mean:.5}"),
                format!("{:.5}", mean - truth[i]),
                format!("{sd:.5}"),
                format!("{mean_se:.5}"),
                format!("{cover:.4}"),
            ]
        })
        .collect();
    let path = ctx.out.path("table1.csv");
    write_table_file(&path, &ctx.prov.comments("table1"), &header, &rows)?;
    let converged = fits.iter().filter(|f| f.converged).count();
    ctx.out.json("run.json", &ctx.prov, c, &serde_json::json!({ "replicates": reps, "n": n, "converged": converged }))?;
    ctx.say(format!("{:<10} {:>8} {:>9} {:>9} {:>8} {:>8} {:>8}", header[0], header[1], header[2], header[3], header[4], header[5], header[6]));
    for r in &rows {
        ctx.say(format!("{:<10} {:>8} {:>9} {:>9} {:>8} {:>8} {:>8}", r[0], r[1], r[2], r[3], r[4], r[5], r[6]));
    }
    ctx.say(format!("{converged}/{reps} fits converged in {:.0}s; wrote {}", start.elapsed().as_secs_f64(), path.display()));
    Ok(())
}

fn replicate_optimization(ctx: &Ctx, scale: Scale, mode: RiskMode, name: &str) -> anyhow::Result<()> {
    let mut c = ctx.config.clone();
    c.run.mode = mode;
    c.search.k_eval = match scale {
        Scale::Desk => 10_000,
        Scale::Full => {
            ctx.say("full scale: 10^5 replicates per evaluation, roughly 10x the desk runtime");
            100_000
        }
    };
    let omegas = table_omegas();
    let mut out_rows = Vec::new();
    for c_val in [0.5, -0.5] {
        let profiles = [Profile { d: 0, c: c_val }, Profile { d: 1, c: c_val }];
        let rows = sweep(&c, &omegas, &profiles)?;
        let (d0, d1) = rows.split_at(omegas.len());
        for (a, b) in d0.iter().zip(d1) {
            let mut row = vec![format!("{c_val}"), format!("{}", a.omega)];
            for r in [a, b] {
                row.extend([
                    format!("{:.3}", r.beta_star),
                    format!("{:.3}", r.cost_y),
                    format!("{:.3}", r.cost_trt),
                    format!("{:.3}", r.total),
                    format!("{:.3}", r.pct_treated / 100.0),
                ]);
            }
            out_rows.push(row);
        }
    }
    let header = [
        "C", "omega", "beta_d0", "cost_y_d0", "cost_trt_d0", "total_d0", "frac_treated_d0", "beta_d1", "cost_y_d1",
        "cost_trt_d1", "total_d1", "frac_treated_d1",
    ];
    let path = ctx.out.path(name);
    write_table_file(&path, &ctx.prov.comments(name.trim_end_matches(".csv")), &header, &out_rows)?;
    ctx.out.json("run.json", &ctx.prov, &c, &serde_json::json!({ "rows": out_rows.len() }))?;
    for r in &out_rows {
        ctx.say(r.join("\t"));
    }
    ctx.say(format!("wrote {}", path.display()));
    Ok(())
}
