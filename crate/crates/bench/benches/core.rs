use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use dyncontrol_core::*;

fn simulation(c: &mut Criterion) {
    let pop = PopulationSpec::illustration(500);
    let assignment = ObservationalAssignmentModel::illustration();
    let schedule = VisitSchedule::unit(10);
    c.bench_function("simulate_cohort n=500 J=10", |b| {
        b.iter(|| simulate_cohort(black_box(&pop), &assignment, &schedule, 1).unwrap())
    });
}

fn risk(c: &mut Criterion) {
    let p = ModelParams::illustration();
    let cov = SubjectCovariates::known_at_population(0.5, 0, &p);
    let spec = RiskSpec::additive_exceedance(1.7, 0.5, LossWindow::ExcludeFinal);
    let problem = RiskProblem::skp(&p, &cov, &VisitSchedule::unit(10), &spec, 2000, 1).unwrap();
    c.bench_function("risk threshold k=2000", |b| {
        b.iter(|| problem.evaluate(&StrategySpec::PersonalizedThreshold { beta: black_box(-2.0) }).unwrap())
    });
    let prior = PosteriorState::prior(&p);
    let spdp = RiskProblem::spdp(&prior, &p, &SubjectCovariates::new(0.5, 0), &VisitSchedule::unit(10), &spec, 2000, 1).unwrap();
    c.bench_function("risk prediction rule k=2000", |b| {
        b.iter(|| spdp.evaluate(&StrategySpec::ParamPredictionContainment { eta: 1.7, beta: black_box(0.2) }).unwrap())
    });
}

fn estimation(c: &mut Criterion) {
    let cohort = simulate_cohort(
        &PopulationSpec::illustration(500),
        &ObservationalAssignmentModel::illustration(),
        &VisitSchedule::unit(10),
        3,
    )
    .unwrap();
    let p = ModelParams::illustration();
    c.bench_function("log_likelihood n=500 J=10", |b| b.iter(|| log_likelihood(black_box(&cohort), &p).unwrap()));
    let mut group = c.benchmark_group("fit");
    group.sample_size(10);
    group.bench_function("fit_ml n=500 J=10", |b| {
        b.iter(|| fit_ml(&cohort, &ols_init(&cohort).unwrap(), &FitOptions { compute_vcov: false, ..FitOptions::default() }).unwrap())
    });
    group.finish();
}

fn posterior(c: &mut Criterion) {
    let p = ModelParams::illustration();
    let cov = SubjectCovariates::new(0.5, 1);
    let schedule = VisitSchedule::unit(10);
    let a = vec![0, 0, 1, 1, 1, 0, 0, 1, 1, 1];
    let z: Vec<f64> = (0..11).map(|j| -2.0 + 0.4 * j as f64).collect();
    let prior = PosteriorState::prior(&p);
    c.bench_function("posterior_update 11 visits", |b| {
        b.iter(|| {
            let de = design_expansion(schedule.times(), &cov, &a, &p).unwrap();
            posterior_update(&prior, black_box(&z), &de).unwrap()
        })
    });
}

fn oracle(c: &mut Criterion) {
    let p = ModelParams::illustration();
    let cov = SubjectCovariates::known_at_population(0.5, 0, &p);
    let schedule = VisitSchedule::unit(2);
    let spec = RiskSpec::additive_exceedance(1.7, 0.5, LossWindow::AllVisits);
    let strategy = StrategySpec::PersonalizedThreshold { beta: 0.0 };
    let ctx = RecurrenceContext { params: &p, cov: &cov, schedule: &schedule, strategy: &strategy, spec: &spec, options: GridOptions::default() };
    let mut group = c.benchmark_group("oracle");
    group.sample_size(10);
    group.bench_function("threshold J=2 512 points", |b| b.iter(|| oracle_risk(black_box(&ctx)).unwrap()));
    group.finish();
}

criterion_group!(benches, simulation, risk, estimation, posterior, oracle);
criterion_main!(benches);
