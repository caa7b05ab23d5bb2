use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tailcast::{Error, ErrorClass};

mod commands;
mod config;

use config::DataSource;

#[derive(Parser)]
#[command(name = "tailcast", version, about = "Forecasting extremes in long-tailed time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; every field is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Generator seed for `synth`, single training seed otherwise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory of the run directories.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted config path assignment, e.g. `train.strategy=meta`. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Model to start from; defaults to the run's trained model.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate a synthetic long-tailed series as CSV.
    Synth,
    /// Train a model with the configured reweighting strategy.
    Train,
    /// Fine-tune a trained model on extreme windows with frozen layers.
    Finetune,
    /// Score a model on the test split.
    Evaluate,
    /// Write last-hidden-layer embeddings of sampled test windows.
    ExportEmbeddings,
}

fn run(cli: &Cli) -> tailcast::Result<Vec<PathBuf>> {
    let mut config = config::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        match (cli.command, &mut config.data) {
            (Command::Synth, DataSource::Synth(spec)) => spec.seed = seed,
            _ => config.seeds = vec![seed],
        }
    }
    config.validate()?;
    let checkpoint = cli.checkpoint.as_deref();
    match cli.command {
        Command::Synth => commands::synth(&config),
        Command::Train => commands::train(&config),
        Command::Finetune => commands::finetune(&config, checkpoint),
        Command::Evaluate => commands::evaluate(&config, checkpoint),
        Command::ExportEmbeddings => commands::export(&config, checkpoint),
    }
}

fn exit_code(e: &Error) -> (u8, &'static str) {
    match e.class() {
        ErrorClass::Config => (2, "config"),
        ErrorClass::Data => (3, "data"),
        ErrorClass::Numeric => (4, "numeric"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (code, class) = exit_code(&e);
            let msg = serde_json::json!({ "error": { "class": class, "message": e.to_string() } });
            eprintln!("{msg}");
            ExitCode::from(code)
        }
    }
}
