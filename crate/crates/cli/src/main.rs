use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use pathmfg_cli::{execute, Command, Overrides};

/// Particle solver and certificates for first-order mean field games.
#[derive(Debug, Parser)]
#[command(name = "pathmfg", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Root directory for run directories; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    threads: Option<usize>,
    /// Use the Lipschitz-restricted equilibrium solver.
    #[arg(long)]
    lipschitz: bool,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let overrides = Overrides {
        out: args.out,
        seed: args.seed,
        threads: args.threads,
        lipschitz: args.lipschitz,
    };
    match execute(args.command, &args.config, &overrides) {
        Ok(outcome) => {
            println!("{}", outcome.dir.join("report.json").display());
            if !outcome.passed {
                eprintln!("assertions failed:");
                if let Some(list) = outcome.report["assertions"].as_array() {
                    for a in list.iter().filter(|a| a["pass"] == false) {
                        eprintln!("  {} = {} (limit {} {})", a["name"], a["value"], a["relation"], a["limit"]);
                    }
                }
            }
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
