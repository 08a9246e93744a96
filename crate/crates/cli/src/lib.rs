//! Config-driven experiment runner: every pipeline of `cocycle-core` as a
//! subcommand, with JSON reports and CSV series.

pub mod commands;
pub mod config;
pub mod output;
pub mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use cocycle_core::conformal::ConformalMode;
use cocycle_core::splitting::PipelineMode;

use crate::commands::{Command, SweepParam};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "COCYCLE_THREADS";

/// Exit code for usage and configuration errors.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "cocycle", version, about = "Almost reduction, conformal perturbation and dominated splittings of matrix cocycles")]
pub struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides `sampling.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Include per-point matrices in the report.
    #[arg(long, global = true)]
    pub full: bool,
    /// One common fixed truncation for all Gram matrices in a comparison.
    #[arg(long, global = true)]
    pub strict: bool,
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Constant,
    Function,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PipelineArg {
    UniquelyErgodic,
    Minimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ParamArg {
    Epsilon,
    Horizon,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Lyapunov exponent estimates and product bounds.
    Exponents,
    /// Metric-preserving perturbation and isometric conjugates.
    Reduce,
    /// Conformal perturbation with a constant or a determinant rate.
    Conformalize {
        #[arg(long, value_enum)]
        mode: ModeArg,
    },
    /// Finest dominated splitting, bundles and adapted metric.
    Split,
    /// Conformal-subbundle decomposition.
    Pipeline {
        #[arg(long, value_enum)]
        mode: PipelineArg,
    },
    /// Repeats a stage over a parameter grid and writes a CSV series.
    Sweep {
        #[arg(long, value_enum)]
        param: ParamArg,
        /// Grid values; defaults to the `sweep` table of the config.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Prints the JSON schema of the configuration format.
    Schema,
}

impl CliCommand {
    fn to_command(&self) -> Option<Command> {
        Some(match self {
            CliCommand::Exponents => Command::Exponents,
            CliCommand::Reduce => Command::Reduce,
            CliCommand::Conformalize { mode: ModeArg::Constant } => Command::Conformalize(ConformalMode::Constant),
            CliCommand::Conformalize { mode: ModeArg::Function } => Command::Conformalize(ConformalMode::Function),
            CliCommand::Split => Command::Split,
            CliCommand::Pipeline { mode: PipelineArg::UniquelyErgodic } => Command::Pipeline(PipelineMode::UniquelyErgodic),
            CliCommand::Pipeline { mode: PipelineArg::Minimal } => Command::Pipeline(PipelineMode::Minimal),
            CliCommand::Sweep { param, values } => Command::Sweep {
                param: match param {
                    ParamArg::Epsilon => SweepParam::Epsilon,
                    ParamArg::Horizon => SweepParam::Horizon,
                },
                values: values.clone(),
            },
            CliCommand::Schema => return None,
        })
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = raw.trim().parse().map_err(|_| format!("{THREADS_ENV} must be a positive integer, got `{raw}`"))?;
    if n == 0 {
        return Err(format!("{THREADS_ENV} must be a positive integer, got `{raw}`"));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

/// Runs the parsed command line and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let Some(command) = cli.command.to_command() else {
        print!("{}", String::from_utf8(output::to_json(&config::schema())).expect("utf-8 JSON"));
        return 0;
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    let Some(path) = &cli.config else {
        eprintln!("error: --config PATH is required");
        return EXIT_USAGE;
    };
    let mut cfg = match config::load(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return EXIT_USAGE;
        }
    };
    if let Some(seed) = cli.seed {
        cfg.sampling.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.display().to_string();
    }
    cfg.output.full |= cli.full;
    cfg.norm.strict |= cli.strict;
    let verbosity = cfg.output.verbosity;
    let dir = PathBuf::from(&cfg.output.dir);
    let outcome = match commands::run(cfg, &command) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return EXIT_USAGE;
        }
    };
    let written = match output::write_outcome(&dir, &outcome) {
        Ok(w) => w,
        Err(e) => {
            eprintln!("error: cannot write output to {}: {e}", dir.display());
            return EXIT_USAGE;
        }
    };
    let report = &outcome.report;
    if let Some(err) = &report.error {
        eprintln!("error in stage `{}`: {}", err.stage, err.message);
    }
    if verbosity >= 1 {
        let status = match outcome.exit_code() {
            0 => "PASS".to_string(),
            1 => format!("FAIL ({})", report.failed_verdicts().join(", ")),
            _ => "ERROR".to_string(),
        };
        println!("{}: {status}; report {}", report.command, written[0].display());
        for w in &report.warnings {
            println!("warning: {w}");
        }
    }
    if verbosity >= 2 {
        for v in &report.verdicts {
            println!("  {:<34} {}", v.name, if v.passed { "pass" } else { "FAIL" });
        }
    }
    outcome.exit_code()
}
