//! Command-line driver: reads a run configuration, executes one subcommand
//! and writes a JSON report plus CSV tables into a fresh run directory.

// Checks such as `!(x > 0.0)` reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod report;
pub mod run;

use std::path::{Path, PathBuf};

use clap::ValueEnum;

pub use config::{load_config, parse_config, ConfigError, RunConfig};
pub use report::Report;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error:\n{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Solver(#[from] pathmfg_core::Error),
}

impl CliError {
    /// 2 for configuration or usage problems, 3 for I/O, 4 for numerical
    /// failures. Failed assertions exit with 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Solver(pathmfg_core::Error::NumericalFailure { .. }) => 4,
            CliError::Solver(_) => 2,
        }
    }
}

pub const EXIT_ASSERTION: i32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    SolveOcp,
    Equilibrium,
    Diagnose,
    CheckPde,
    CheckMonotone,
    CheckUnique,
    Bench,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::SolveOcp => "solve-ocp",
            Command::Equilibrium => "equilibrium",
            Command::Diagnose => "diagnose",
            Command::CheckPde => "check-pde",
            Command::CheckMonotone => "check-monotone",
            Command::CheckUnique => "check-unique",
            Command::Bench => "bench",
        }
    }
}

/// Command-line overrides of the configuration.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub lipschitz: bool,
}

/// Where a run wrote its artifacts and whether its assertions held.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub dir: PathBuf,
    pub passed: bool,
    pub report: serde_json::Value,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            EXIT_ASSERTION
        }
    }
}

/// Loads `config_path`, applies overrides and runs `command`.
pub fn execute(command: Command, config_path: &Path, overrides: &Overrides) -> Result<Outcome, CliError> {
    let mut cfg = load_config(config_path)?;
    if let Some(seed) = overrides.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &overrides.out {
        cfg.output_dir = out.clone();
    } else if cfg.output_dir.is_relative() {
        let base = config_path.parent().unwrap_or(Path::new("."));
        cfg.output_dir = base.join(&cfg.output_dir);
    }
    let threads = overrides.threads.or(cfg.threads);
    if threads == Some(0) {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    pool.install(|| execute_config(command, cfg, overrides.lipschitz))
}

/// Runs `command` on an already validated configuration.
pub fn execute_config(command: Command, cfg: RunConfig, lipschitz: bool) -> Result<Outcome, CliError> {
    let dir = report::run_directory(&cfg.output_dir, command.name())?;
    let ctx = run::Context::new(cfg, lipschitz)?;
    let mut rep = ctx.header(command.name());
    match command {
        Command::SolveOcp => rep.merge(run::solve_ocp(&ctx, &dir)?),
        Command::Equilibrium => {
            let eq = ctx.equilibrium()?;
            rep.merge(run::equilibrium(&eq, &dir)?);
        }
        Command::Diagnose => {
            let eq = ctx.equilibrium()?;
            let probe = ctx.probe(eq.flow()?)?;
            rep.merge(run::diagnose(&ctx, &eq, &probe, &dir)?);
        }
        Command::CheckPde => {
            let eq = ctx.equilibrium()?;
            let probe = ctx.probe(eq.flow()?)?;
            rep.merge(run::check_pde(&ctx, &eq, &probe, &dir)?);
        }
        Command::CheckMonotone => rep.merge(run::check_monotone(&ctx, &dir)?),
        Command::CheckUnique => rep.merge(run::check_unique(&ctx, &dir)?),
        Command::Bench => {
            let (bench, timings) = run::bench(&ctx, &dir)?;
            rep = bench;
            report::write_json(&dir.join("timings.json"), &timings)?;
        }
    }
    let value = rep.to_value();
    report::write_json(&dir.join("report.json"), &value)?;
    Ok(Outcome {
        dir,
        passed: rep.passed(),
        report: value,
    })
}
