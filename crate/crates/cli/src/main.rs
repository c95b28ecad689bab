use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fdg_sim::commands::{self, Context};
use fdg_sim::config::ExperimentConfig;
use fdg_sim::error::{CliError, CliResult};
use fdg_sim::variant::Variant;

#[derive(Debug, Parser)]
#[command(name = "fdg-sim", version, about = "Federated domain-generalization simulator")]
struct Cli {
    /// Plain-text `key = value` config; defaults apply to unset keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory. Falls back to `run.out_dir`, then `./fdg-out`.
    #[arg(long, global = true, env = "FDG_SIM_OUT")]
    out: Option<PathBuf>,

    /// v1..v6 or full.
    #[arg(long, global = true)]
    variant: Option<Variant>,

    /// Held-out (unseen) domain index.
    #[arg(long, global = true)]
    holdout: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the synthetic world of one seed.
    Generate,
    /// Stage 1: per-client style transforms and augmentation banks.
    TrainMst,
    /// Stage 2: federated prompt tuning.
    TrainPrompts,
    /// Unseen-domain accuracy of trained prompts.
    Evaluate,
    /// Variant x seed x held-out domain matrix with a summary.
    Ablate,
    /// Upload size per client and round, plus totals of finished runs.
    CommReport,
    /// Nearest real neighbours of augmented embeddings.
    NnAudit,
    /// Print the effective config.
    ShowConfig,
}

fn run(cli: Cli) -> CliResult<String> {
    let config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    let out = cli
        .out
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("fdg-out"));
    let ctx = Context {
        config,
        out,
        seed: cli.seed,
        holdout: cli.holdout,
        variant: cli.variant,
    };
    match cli.command {
        Command::Generate => commands::generate(&ctx),
        Command::TrainMst => commands::train_mst(&ctx),
        Command::TrainPrompts => commands::train_prompts_cmd(&ctx),
        Command::Evaluate => commands::evaluate_cmd(&ctx),
        Command::Ablate => commands::ablate(&ctx),
        Command::CommReport => commands::comm_report(&ctx),
        Command::NnAudit => commands::nn_audit(&ctx),
        Command::ShowConfig => Ok(ctx.config.to_text()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("fdg-sim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
