mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Run;
use error::CliError;

#[derive(Parser)]
#[command(name = "eviseg", version, about = "Evidential segmentation experiments on synthetic data")]
struct Cli {
    /// Config file; defaults apply to any key it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides `[run] seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Threads for evaluation and filtering.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    /// Output root; beats `[paths] out`.
    #[arg(long, global = true, env = "EVISEG_OUT")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/val/test (and optional ood) splits under OUT/data.
    Gen,
    /// Train on OUT/data/train; writes OUT/checkpoint and OUT/train_log.jsonl.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score the test split under each configured degradation; writes OUT/eval.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Fit u* on validation data and flag test images; writes OUT/filter.
    Filter {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Repeatable; sets are pooled. Defaults to OUT/data/test.
        #[arg(long)]
        test: Vec<PathBuf>,
    },
    /// Aggregate eval reports (files or directories) into OUT/report.
    Report { inputs: Vec<PathBuf> },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => config::load(path)?,
        None => config::RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if cli.workers == 0 {
        return Err(CliError::Config("--workers must be at least 1".into()));
    }
    let out = cli.out.clone().or_else(|| config.out.clone()).unwrap_or_else(|| PathBuf::from("runs"));
    let run = Run { config, out, workers: cli.workers };
    match cli.command {
        Command::Gen => commands::gen(&run),
        Command::Train { data } => commands::train(&run, data.as_deref()),
        Command::Eval { checkpoint, test } => commands::eval(&run, checkpoint.as_deref(), test.as_deref()).map(drop),
        Command::Filter { checkpoint, val, test } => {
            commands::filter(&run, checkpoint.as_deref(), val.as_deref(), &test).map(drop)
        }
        Command::Report { inputs } => commands::report(&run, &inputs).map(drop),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("eviseg: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
