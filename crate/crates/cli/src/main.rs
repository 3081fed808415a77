use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gsir_cli::{bench, decode, encode, eval, train, CliError, CliResult};
use serde::Serialize;

/// Stage-wise residual Gaussian image codec.
#[derive(Debug, Parser)]
#[command(name = "gsir", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Encode an image into a .gsir stream.
    Encode(encode::EncodeArgs),
    /// Decode a .gsir stream into an image.
    Decode(decode::DecodeArgs),
    /// Compare a reconstruction against a reference image.
    Eval(eval::EvalArgs),
    /// Run an ablation suite.
    Bench(bench::BenchArgs),
    /// Train the tiny predictor.
    Train(train::TrainArgs),
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("GSIR_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| CliError::Usage(format!("GSIR_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Usage(e.to_string()))
}

fn print(report: &impl Serialize) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(report).map_err(|e| CliError::Numeric(e.to_string()))?);
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Encode(a) => print(&encode::run(&a)?),
        Command::Decode(a) => print(&decode::run(&a)?),
        Command::Eval(a) => print(&eval::run(&a)?),
        Command::Bench(a) => print(&bench::run(&a)?),
        Command::Train(a) => print(&train::run(&a)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gsir: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
