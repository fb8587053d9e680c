use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

#[derive(Debug, Parser)]
#[command(
    name = "invrob",
    version,
    about = "Robustness experiments for inverse-problem solvers"
)]
struct Cli {
    /// JSON configuration for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory of the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Samples an operator and train/test datasets.
    GenData,
    /// Trains a reconstruction network.
    Train,
    /// Attacks one method on one test signal.
    Attack,
    /// Runs noise-to-error curves for several methods.
    Curve,
    /// Evaluates a stored perturbation on another method.
    Transfer,
    /// Compares iterative nets trained with and without jittering.
    AblateJitter,
    /// Margin attack on the jump-parity classification pipeline.
    ClassifyAttack,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    let path = cli
        .config
        .ok_or_else(|| anyhow::anyhow!("--config <PATH> is required"))?;
    let text = std::fs::read_to_string(&path)
        .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
    let o = commands::Overrides {
        seed: cli.seed,
        out: cli.out,
    };
    match cli.command {
        Command::GenData => commands::gen_data(&text, &o),
        Command::Train => commands::train(&text, &o),
        Command::Attack => commands::attack(&text, &o),
        Command::Curve => commands::curve(&text, &o),
        Command::Transfer => commands::transfer(&text, &o),
        Command::AblateJitter => commands::ablate(&text, &o),
        Command::ClassifyAttack => commands::classify(&text, &o),
    }
}
