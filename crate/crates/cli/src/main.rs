//! `viralsim`: validate scenarios, run seed sweeps, aggregate traces.
//!
//! Exit status: 0 success, 1 validation failure, 2 runtime failure.

mod report;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use viralsim::sim::Scenario;

#[derive(Parser)]
#[command(name = "viralsim", version, about = "Deterministic simulator of self-compiling, proximity-spreading apps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario file and report every problem found.
    Validate { scenario: PathBuf },
    /// Run a scenario for one seed or an inclusive seed range.
    Run {
        scenario: PathBuf,
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        /// Inclusive range, e.g. `1..10`.
        #[arg(long, value_parser = run::parse_seed_range)]
        seeds: Option<run::SeedRange>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of trace,summary,infection,transfers.
        #[arg(long, value_delimiter = ',', default_value = "trace,summary,infection,transfers")]
        emit: Vec<run::Emit>,
        /// Suppress the printed summary table.
        #[arg(long)]
        quiet: bool,
    },
    /// Aggregate metrics across traces of one scenario.
    Report {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        /// Write the CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure classes, mapped onto exit codes.
pub enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Runtime(m) => m,
        }
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario, Failure> {
    if !path.is_file() {
        return Err(Failure::Validation(format!("{}: no such file", path.display())));
    }
    Scenario::load(path).map_err(|e| {
        let lines: Vec<String> = e.errors().into_iter().map(|m| format!("{}: {m}", path.display())).collect();
        Failure::Validation(lines.join("\n"))
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Validate { scenario } => load_scenario(&scenario).map(|s| {
            println!("{}: ok ({} devices, {} scripted encounters)", scenario.display(), s.devices.len(), s.encounters.len());
        }),
        Command::Run { scenario, seed, seeds, out, emit, quiet } => {
            let seeds = match (seed, seeds) {
                (Some(s), _) => run::SeedRange { first: s, last: s },
                (None, Some(r)) => r,
                (None, None) => run::SeedRange { first: 0, last: 0 },
            };
            run::run(&scenario, seeds, &out, &emit, quiet)
        }
        Command::Report { traces, out } => report::report(&traces, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.message());
            ExitCode::from(f.code())
        }
    }
}
