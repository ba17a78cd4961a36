//! Dynamic treatment control for a longitudinal biomarker.
//!
//! The marker follows a Brownian motion with drift that depends on subject
//! covariates, subject random effects and treatment, and is observed with
//! noise at scheduled visits. The crate simulates cohorts, fits the marker
//! law by maximum likelihood, estimates the risk of treatment strategies by
//! Monte Carlo, tunes strategy thresholds, adapts strategies to one subject
//! through Bayesian updating and cross-checks Monte Carlo risks against
//! numerical integration.

pub mod bayes;
pub mod error;
pub mod inference;
pub mod io;
pub mod model;
pub mod optimizer;
pub mod oracle;
pub mod risk;
pub mod rng;
pub mod simulation;
pub mod strategies;

pub use bayes::{
    design_expansion, dtdr_run, posterior_predictive, posterior_update, posterior_update_precision, DesignExpansion,
    DtdrConfig, DtdrTrace, DtdrVisit, PosteriorState,
};
pub use error::{Error, Result};
pub use inference::{bootstrap_se, fit_ml, log_likelihood, marginal_covariance, ols_init, BootstrapSummary, FitOptions, FittedModel};
pub use model::{Gaussian, ModelParams, SubjectCovariates, Trajectory, VisitSchedule};
pub use optimizer::{local_search, optimize_threshold, sweep_omega, Profile, SearchConfig, SweepRow, ThresholdOptimum};
pub use oracle::{closed_form_fixed_regime, oracle_risk, FixedRegime, GridOptions, OracleRisk, RecurrenceContext};
pub use risk::{
    contrast, estimate_risk_marginal, estimate_risk_skp, estimate_risk_spdp, loss, Contrast, LossWindow, RiskEstimate,
    RiskKind, RiskProblem, RiskSpec,
};
pub use rng::{derive_seed, stream, Stream};
pub use simulation::{
    simulate_cohort, simulate_cohort_with_strategy, simulate_subject, Cohort, CohortMeta, CohortSubject, NoiseBank,
    PopulationSpec,
};
pub use strategies::{decide, MarkerFilter, ObservationalAssignmentModel, ObservedHistory, StrategySpec};
