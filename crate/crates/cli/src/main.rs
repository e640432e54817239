use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rematch::Error;

mod commands;
mod files;

#[derive(Parser, Debug)]
#[command(name = "rematch", version, about = "Train and evaluate multi-token retrieval embeddings on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints, metrics.csv and manifest.json into OUT.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset's eval split and write a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the fused embeddings as CSV.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Finite-difference check of every loss term in 64-bit arithmetic.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write the unified matching mask for both slot assignments as PGM plus JSON.
    MaskDump {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Process exit status for a failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 4,
        Error::NonFinite { .. } | Error::DegenerateVector(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out } => commands::gen_data(&config, &out),
        Command::Train {
            config,
            data,
            out,
            resume,
        } => commands::train(&config, &data, &out, resume.as_deref()),
        Command::Eval {
            ckpt,
            data,
            out,
            embeddings,
        } => commands::eval(&ckpt, &data, &out, embeddings.as_deref()),
        Command::Gradcheck { config } => commands::gradcheck(&config),
        Command::MaskDump { config, out } => commands::mask_dump(&config, &out),
    };
    match result {
        Ok(commands::Outcome::Done) => ExitCode::SUCCESS,
        Ok(commands::Outcome::Failed(code)) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
