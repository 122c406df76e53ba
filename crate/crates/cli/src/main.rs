use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand as ClapSubcommand};
use ctxlab::experiments::{run, CommandError, ExperimentConfig, Subcommand};

#[derive(Parser)]
#[command(name = "ctxlab", version, about = "Move prompt context into MLP weights and check the experiments built on it")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(ClapSubcommand)]
enum Command {
    /// Train a contextual block on in-context linear regression.
    Train(Common),
    /// Compare prompt and ΔW predictions on every checkpoint and run the random transfer suite.
    Verify(Common),
    /// Average change of the transferred weights per context token.
    Dynamics(Common),
    /// Finetuning by gradient descent against weight transfer of the same examples.
    FinetuneCompare(Common),
    /// Run every invariant suite and print a pass/fail table.
    Selftest(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Checkpoint file or directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, action = clap::ArgAction::Set)]
    plots: Option<bool>,
}

fn build_config(sub: Subcommand, flags: Common) -> Result<ExperimentConfig, CommandError> {
    let mut config = match &flags.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| CommandError::Usage(format!("{}: {e}", path.display())))?,
        None => ExperimentConfig::default(),
    };
    config.subcommand = sub;
    if let Some(out) = flags.out {
        config.out = out;
    }
    if let Some(seed) = flags.seed {
        config.train.seed = seed;
    }
    if let Some(trials) = flags.trials {
        config.trials = trials;
    }
    if let Some(ckpt) = flags.checkpoint {
        config.checkpoint = Some(ckpt);
    }
    if let Some(plots) = flags.plots {
        config.plots = plots;
    }
    Ok(config)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let (sub, flags) = match cli.command {
        Command::Train(f) => (Subcommand::Train, f),
        Command::Verify(f) => (Subcommand::Verify, f),
        Command::Dynamics(f) => (Subcommand::Dynamics, f),
        Command::FinetuneCompare(f) => (Subcommand::FinetuneCompare, f),
        Command::Selftest(f) => (Subcommand::Selftest, f),
    };
    match build_config(sub, flags).and_then(|c| run(&c)) {
        Ok(report) => {
            let mut out = std::io::stdout().lock();
            for line in report.summary {
                let _ = writeln!(out, "{line}");
            }
            for file in report.files {
                let _ = writeln!(out, "wrote {}", file.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("ctxlab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
