mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "bandminer", version, about = "Learnable band-pass feature mining for multichannel recordings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Configuration file (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed from the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (dataset directory for `synth`, runs root otherwise).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Folds trained concurrently by `cv`.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Number of cross-validation folds.
    #[arg(long)]
    pub folds: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset; without --config the bundled spec is used.
    Synth(#[command(flatten)] Common),
    /// Train on the whole dataset and write a checkpoint.
    Train(#[command(flatten)] Common),
    /// Evaluate a checkpoint on the dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Subject-held-out cross-validation.
    Cv(#[command(flatten)] Common),
    /// Write the interpretation bundle of a checkpoint.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// 1 for bad inputs, 2 for numerical failures during a run.
fn exit_code(err: &anyhow::Error) -> u8 {
    let runtime = err
        .chain()
        .filter_map(|e| e.downcast_ref::<bandminer::Error>())
        .any(|e| !e.is_validation());
    if runtime {
        2
    } else {
        1
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
    let result = match cli.command {
        Command::Synth(c) => commands::synth(&c),
        Command::Train(c) => commands::train(&c),
        Command::Eval { common, checkpoint } => commands::eval(&common, &checkpoint),
        Command::Cv(c) => commands::cv(&c),
        Command::Export { common, checkpoint } => commands::export(&common, &checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
