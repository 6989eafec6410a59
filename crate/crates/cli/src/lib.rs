//! Experiment runner for `toc-align`.
//!
//! Four subcommands share one JSON configuration ([`config::ExperimentConfig`]):
//! `run` trains systems and evaluates the encoder x decoder grid, `bench`
//! times the alignment estimators, `check-bounds` tests the Lipschitz gap
//! bound, and `validate-config` only checks the configuration. Every result
//! file carries the hash of the configuration that produced it.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "toc-align",
    version,
    about = "Align independently trained task-oriented communication systems"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train all systems and evaluate every encoder/decoder pair.
    Run(RunArgs),
    /// Time the alignment estimators.
    Bench(CommonArgs),
    /// Check the Lipschitz bound on the cross-model gap; exits 3 on a violation.
    CheckBounds(RunArgs),
    /// Validate a configuration without computing anything.
    ValidateConfig(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON configuration file; defaults apply when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a config field by dotted path, e.g. `--set bounds.trials=5`.
    /// Values are parsed as JSON, falling back to a string.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory; beats the config and the TOC_ALIGN_OUTPUT_DIR variable.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Maximum number of grid cells evaluated concurrently.
    #[arg(long, short, default_value_t = default_jobs())]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
    /// Print the configuration JSON Schema instead of validating.
    #[arg(long)]
    pub print_schema: bool,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Executes a parsed command and returns what to print on success.
pub fn execute(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Run(a) => {
            let cfg = config::load(a.common.config.as_deref(), &a.common.overrides)?;
            let dir = cfg.resolve_output_dir(a.common.out.as_deref());
            let o = commands::run(&cfg, &dir, a.jobs)?;
            Ok(summary(&o))
        }
        Command::Bench(a) => {
            let cfg = config::load(a.config.as_deref(), &a.overrides)?;
            let dir = cfg.resolve_output_dir(a.out.as_deref());
            Ok(summary(&commands::bench(&cfg, &dir)?))
        }
        Command::CheckBounds(a) => {
            let cfg = config::load(a.common.config.as_deref(), &a.common.overrides)?;
            let dir = cfg.resolve_output_dir(a.common.out.as_deref());
            Ok(summary(&commands::check_bounds(&cfg, &dir, a.jobs)?))
        }
        Command::ValidateConfig(a) => {
            if a.print_schema {
                return Ok(
                    serde_json::to_string_pretty(&config::schema()).expect("schema serializes")
                );
            }
            let cfg = config::load(a.config.as_deref(), &a.overrides)?;
            Ok(format!("config ok, hash {}", cfg.hash()))
        }
    }
}

fn summary(o: &commands::Outcome) -> String {
    format!(
        "wrote {} rows to {} (manifest {}), config hash {}",
        o.rows,
        o.csv.display(),
        o.manifest.display(),
        o.config_hash
    )
}
