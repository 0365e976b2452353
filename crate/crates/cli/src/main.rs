mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sht_core::error::ErrorClass;
use sht_core::ShtError;

#[derive(Parser, Debug)]
#[command(name = "sht", version, about = "Face landmark detection and hallucination")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Configuration file (TOML).
    #[arg(long, global = true, env = "SHT_CONFIG")]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set optim.lr_dhln=5e-4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one or more training phases.
    Train(commands::TrainArgs),
    /// Score a checkpoint on a labeled dataset.
    Eval(commands::EvalArgs),
    /// Write landmark files for input images.
    Detect(commands::InferArgs),
    /// Write hallucinated high-resolution faces for input images.
    Hallucinate(commands::InferArgs),
    /// Re-render a face in the pose of target landmarks.
    Transfer(commands::TransferArgs),
    /// Generate a synthetic dataset and a matching config.
    MakeToyData(commands::ToyArgs),
    /// Convert 300W `.pts` files to plain landmark files.
    ConvertPts(commands::ConvertArgs),
}

/// Misuse that is not a library error, such as refusing to overwrite outputs.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ShtError>() {
            return match e.class() {
                ErrorClass::Config => 1,
                ErrorClass::Data => 2,
                ErrorClass::Runtime => 3,
            };
        }
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    3
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let g = &cli.global;
    let result = match cli.command {
        Command::Train(a) => commands::train(g, a),
        Command::Eval(a) => commands::eval(g, a),
        Command::Detect(a) => commands::detect(g, a),
        Command::Hallucinate(a) => commands::hallucinate(g, a),
        Command::Transfer(a) => commands::transfer(g, a),
        Command::MakeToyData(a) => commands::make_toy_data(a),
        Command::ConvertPts(a) => commands::convert_pts(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
