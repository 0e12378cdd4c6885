//! `kseed` command-line front end: one JSON run configuration in, reports and
//! CSV fields out. See [`error::ExitCode`] for the exit status contract.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::Setup;
use crate::config::RunConfig;
use crate::error::{CliError, ExitCode};

#[derive(Debug, Parser)]
#[command(name = "kseed", version, about = "Initial densities for absorbed diffusions with a prescribed decrement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Override a scalar leaf, e.g. `--set time.T=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Construct (ρ, α) for the configured γ and verify it.
    Seed(Common),
    /// Evolve a density given as CSV and write the trajectory.
    Evolve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rho: PathBuf,
    },
    /// Estimate the spectral radius of the time-T map.
    Spectrum {
        #[command(flatten)]
        common: Common,
        /// Also assemble the dense kernel and export it with its singular values.
        #[arg(long)]
        assemble: bool,
    },
    /// Simulate the absorbed process from ρ and compare with the PDE.
    Mc {
        #[command(flatten)]
        common: Common,
        /// Density CSV to start from.
        #[arg(long, conflicts_with = "solution", required_unless_present = "solution")]
        rho: Option<PathBuf>,
        /// Directory written by `seed`; its rho.csv is used.
        #[arg(long)]
        solution: Option<PathBuf>,
    },
    /// Re-check a solution directory written by `seed`.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        solution: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Seed(c) => c,
            Command::Evolve { common, .. }
            | Command::Spectrum { common, .. }
            | Command::Mc { common, .. }
            | Command::Verify { common, .. } => common,
        }
    }
}

fn execute(command: &Command, out_dir: &mut Option<PathBuf>) -> Result<(), CliError> {
    let common = command.common();
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::new(ExitCode::Internal, e.to_string()))?;
    }
    let config = RunConfig::load(&common.config, &common.overrides)?;
    *out_dir = Some(config.output.dir.clone());
    let setup = Setup::new(config)?;
    let abs = |p: &PathBuf| std::path::absolute(p).map_err(CliError::from);
    match command {
        Command::Seed(_) => commands::seed(setup),
        Command::Evolve { rho, .. } => commands::evolve_cmd(setup, &abs(rho)?),
        Command::Spectrum { assemble, .. } => commands::spectrum(setup, *assemble),
        Command::Mc { rho, solution, .. } => {
            let path = match (rho, solution) {
                (Some(r), _) => abs(r)?,
                (None, Some(dir)) => abs(dir)?.join("rho.csv"),
                (None, None) => return Err(CliError::config("mc needs --rho or --solution")),
            };
            commands::mc(setup, &path)
        }
        Command::Verify { solution, .. } => commands::verify(setup, &abs(solution)?),
    }
}

/// Runs one command and returns the process exit status. On failure the
/// error goes to stderr and, when the output directory is known, to
/// `error.json` inside it.
pub fn run(cli: &Cli) -> i32 {
    let mut out_dir = None;
    match execute(&cli.command, &mut out_dir) {
        Ok(()) => {
            if let Some(dir) = out_dir {
                println!("{}", dir.display());
            }
            ExitCode::Ok.code()
        }
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind.name(), e.message);
            if let Some(dir) = out_dir {
                if std::fs::create_dir_all(&dir).is_ok() {
                    if let Ok(text) = serde_json::to_string_pretty(&e.report()) {
                        let _ = std::fs::write(dir.join("error.json"), text + "\n");
                    }
                }
            }
            e.kind.code()
        }
    }
}

/// Parses arguments and runs; usage errors exit with the configuration code.
pub fn main_with(args: impl IntoIterator<Item = impl Into<OsString> + Clone>) -> i32 {
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                ExitCode::Config.code()
            } else {
                ExitCode::Ok.code()
            }
        }
    }
}
