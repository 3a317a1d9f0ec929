use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gnnad::commands::{self, Context};
use gnnad::config::{Mode, RunConfig};
use gnnad::AppError;

/// Simulate sensor-network benchmarks and detect anomalies in them.
#[derive(Debug, Parser)]
#[command(name = "gnnad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Existing directory for the output files.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Detection mode (overrides detector.mode).
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    /// Config override `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed (overrides the config seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a response series and write it with its train/test blocks.
    Simulate,
    /// Inject drift and variability anomalies into paths.series.
    Inject,
    /// Train the forecaster on paths.train and write a checkpoint.
    Train,
    /// Flag anomalies in paths.test.
    Detect,
    /// Score paths.flags against paths.labels.
    Evaluate,
    /// Run the replication study.
    Replicate,
}

fn run(cli: Cli) -> Result<(), AppError> {
    let mut config = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    commands::check_out_dir(&cli.out)?;
    let ctx = Context {
        config,
        out: cli.out,
        mode: cli.mode,
    };
    match cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::Inject => commands::inject(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Detect => commands::detect(&ctx),
        Command::Evaluate => commands::evaluate(&ctx),
        Command::Replicate => commands::replicate(&ctx),
    }
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
