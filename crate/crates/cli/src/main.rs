mod commands;
mod viz;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use st_mtl::Error;

/// Spatio-temporal multi-task transformer: data generation, training,
/// evaluation and attention-map export.
#[derive(Parser, Debug)]
#[command(name = "st-mtl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic moving-shapes dataset.
    GenData(commands::GenDataArgs),
    /// Train a model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `key=value` config override; repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Config whose model must match the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Metrics JSON destination (default: next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export cross-attention maps and a prediction overlay for one sample.
    VizAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: String,
        #[arg(long)]
        out: PathBuf,
        /// Dataset holding the sample (default: the checkpoint's training set).
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Generation(_) => 2,
        Error::Io { .. } | Error::Parse { .. } | Error::Data(_) => 3,
        Error::Numeric(_) => 4,
        Error::CheckpointMismatch(_) => 5,
        Error::Dimension { .. } | Error::Bounds { .. } | Error::Contract(_) => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => commands::gen_data(&args),
        Command::Train { config, overrides } => commands::train(&config, &overrides),
        Command::Eval {
            checkpoint,
            data,
            config,
            out,
        } => commands::eval(&checkpoint, &data, config.as_deref(), out.as_deref()),
        Command::VizAttn {
            checkpoint,
            sample,
            out,
            data,
        } => viz::viz_attn(&checkpoint, &sample, &out, data.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
