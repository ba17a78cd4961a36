//! `dyncontrol` command line.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::{Ctx, NotConverged};
use config::RunConfig;
use output::{OutputDir, Provenance};

#[derive(Parser, Debug)]
#[command(name = "dyncontrol", version, about = "Simulate, fit and optimize biomarker treatment strategies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads, overriding `run.workers`.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Suppress the console summary.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate an observational or strategy-driven cohort.
    SimulateCohort {
        #[command(flatten)]
        common: Common,
        /// Generate under a fixed treatment regime instead of observational assignment.
        #[arg(long, value_enum)]
        scenario: Option<Scenario>,
    },
    /// Maximum likelihood fit of a cohort CSV.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Cohort CSV, overriding `run.cohort`.
        #[arg(long)]
        cohort: Option<PathBuf>,
    },
    /// Monte Carlo risk of the configured strategy.
    Risk {
        #[command(flatten)]
        common: Common,
    },
    /// Optimal thresholds across the configured weights and profiles.
    Optimize {
        #[command(flatten)]
        common: Common,
    },
    /// Run the dynamic threshold rule on one simulated subject.
    DtdrRun {
        #[command(flatten)]
        common: Common,
    },
    /// Compare Monte Carlo risks with exact and quadrature references.
    OracleCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Regenerate the estimation or optimization summary tables.
    Replicate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        table: Table,
        #[arg(long, value_enum, default_value = "desk")]
        scale: Scale,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum Scenario {
    Never,
    Threshold0,
    Always,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum Table {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum Scale {
    Desk,
    Full,
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::SimulateCohort { common, .. }
            | Command::Fit { common, .. }
            | Command::Risk { common }
            | Command::Optimize { common }
            | Command::DtdrRun { common }
            | Command::OracleCheck { common }
            | Command::Replicate { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::SimulateCohort { .. } => "simulate-cohort",
            Command::Fit { .. } => "fit",
            Command::Risk { .. } => "risk",
            Command::Optimize { .. } => "optimize",
            Command::DtdrRun { .. } => "dtdr-run",
            Command::OracleCheck { .. } => "oracle-check",
            Command::Replicate { .. } => "replicate",
        }
    }
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_NOT_CONVERGED: u8 = 4;

/// Setup failures are configuration errors regardless of their source.
struct Setup(anyhow::Error);

fn exit_code(err: &anyhow::Error) -> u8 {
    use dyncontrol_core::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<NotConverged>().is_some() {
            return EXIT_NOT_CONVERGED;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::DegenerateModel(_) | E::Resolution(_) | E::InvalidPosterior(_) | E::Contract(_) | E::Unsupported(_) => {
                    EXIT_NUMERICAL
                }
                _ => EXIT_CONFIG,
            };
        }
    }
    EXIT_CONFIG
}

fn setup(cmd: &Command) -> Result<(RunConfig, OutputDir), Setup> {
    let common = cmd.common();
    let mut config = RunConfig::load(common.config.as_deref()).map_err(Setup)?;
    if let Some(s) = common.seed {
        config.run.seed = s;
    }
    if let Some(w) = common.workers {
        config.run.workers = Some(w);
    }
    config.validate().context("invalid configuration").map_err(Setup)?;
    if let Some(w) = config.run.workers {
        // Results do not depend on the worker count; only wall time does.
        rayon::ThreadPoolBuilder::new().num_threads(w).build_global().map_err(|e| Setup(e.into()))?;
    }
    let out = OutputDir::create(&common.out).map_err(Setup)?;
    Ok((config, out))
}

fn run(cli: Cli) -> Result<(), (u8, anyhow::Error)> {
    let cmd = cli.command;
    let (config, out) = setup(&cmd).map_err(|Setup(e)| (EXIT_CONFIG, e))?;
    let prov = Provenance::new(cmd.name(), &config).map_err(|e| (EXIT_CONFIG, e))?;
    let quiet = cmd.common().quiet;
    let ctx = Ctx { config, out, prov, quiet: &quiet };
    let result = match &cmd {
        Command::SimulateCohort { scenario, .. } => commands::simulate_cohort_cmd(&ctx, *scenario),
        Command::Fit { cohort, .. } => commands::fit_cmd(&ctx, cohort.as_deref()),
        Command::Risk { .. } => commands::risk_cmd(&ctx),
        Command::Optimize { .. } => commands::optimize_cmd(&ctx),
        Command::DtdrRun { .. } => commands::dtdr_cmd(&ctx),
        Command::OracleCheck { .. } => commands::oracle_check_cmd(&ctx),
        Command::Replicate { table, scale, .. } => commands::replicate_cmd(&ctx, *table, *scale),
    };
    result.map_err(|e| (exit_code(&e), e))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}
