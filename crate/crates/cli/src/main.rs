//! `veritrace` — train, constrain, and interrogate process models from the
//! command line. Every subcommand reads an optional JSON config file; explicit
//! flags win over the config file, which wins over built-in defaults.

mod commands;
mod manifest;
mod params;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use veritrace_core::Result;

#[derive(Debug, Parser)]
#[command(
    name = "veritrace",
    version,
    about = "Neuro-symbolic anomaly detection for process event logs"
)]
struct Cli {
    /// JSON config file; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate an event log from the built-in process graph
    Generate(commands::GenerateArgs),
    /// Mutate a fraction of cases with labeled control-flow anomalies
    Inject(commands::InjectArgs),
    /// Mine declarative constraints, optionally filtering to a knowledge base
    Mine(commands::MineArgs),
    /// Train the denoising autoencoder on a log
    Pretrain(commands::PretrainArgs),
    /// Fine-tune a model against a knowledge base with a logic-loss term
    Finetune(commands::FinetuneArgs),
    /// Score a log with a model and flag anomalous cases
    Detect(commands::DetectArgs),
    /// Compare predictions against ground-truth labels
    Evaluate(commands::EvaluateArgs),
    /// Sweep templates and rare-route counts, comparing against the baseline
    Ablate(commands::AblateArgs),
}

fn run(cli: &Cli) -> Result<()> {
    let config = params::RunConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Generate(args) => commands::cmd_generate(args, &config),
        Command::Inject(args) => commands::cmd_inject(args, &config),
        Command::Mine(args) => commands::cmd_mine(args, &config),
        Command::Pretrain(args) => commands::cmd_pretrain(args, &config),
        Command::Finetune(args) => commands::cmd_finetune(args, &config),
        Command::Detect(args) => commands::cmd_detect(args, &config),
        Command::Evaluate(args) => commands::cmd_evaluate(args, &config),
        Command::Ablate(args) => commands::cmd_ablate(args, &config),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; bad flags are config
            // errors and must exit 2 like any other argument problem.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let record = serde_json::json!({
                "error": {
                    "kind": "argument",
                    "message": e.to_string().lines().next().unwrap_or("invalid arguments"),
                    "exit_code": 2,
                }
            });
            eprintln!("{record}");
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({
                "error": {
                    "kind": e.kind(),
                    "message": e.to_string(),
                    "exit_code": e.exit_code(),
                }
            });
            eprintln!("{record}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
