//! Experiment runner for the adversarial masking contrastive learning
//! pipeline. Thin wrapper over the library: parses arguments, loads the
//! config, dispatches stages.
//!
//! Exit codes: 0 success, 2 config error, 3 stage failure, 4 missing
//! artifact.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use amcl::error::AmclError;
use amcl::pipeline::{run_pipeline, ExperimentConfig, Stage};

#[derive(Parser)]
#[command(
    name = "amcl",
    about = "Adversarial masking contrastive learning experiment runner",
    version
)]
struct Cli {
    /// INI-style experiment config (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config value: section.key=value (repeatable).
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,

    /// Output directory (same as --set pipeline.output_dir=...; the
    /// AMCL_OUTPUT_DIR environment variable takes final precedence).
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    /// Train/test capture session convention (same as dataset.train_session).
    #[arg(long, global = true)]
    train_session: Option<u8>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or validate) the dataset.
    SynthData,
    /// Sample the random block-mask corpus.
    GenMasks,
    /// Train the mask-distribution GAN on the corpus.
    TrainGan,
    /// Contrastive pretraining (adversarial by default).
    Pretrain,
    /// Fine-tune the classifier on labeled training data.
    Finetune,
    /// Evaluate accuracy, EER and ROC on the test session.
    Eval,
    /// Compare pretraining modes under identical budgets.
    Compare,
    /// Render loss curves, ROC curves and mask galleries.
    Report,
    /// Run every stage in order.
    All,
}

fn stages_for(cmd: &Command) -> Vec<Stage> {
    match cmd {
        Command::SynthData => vec![Stage::SynthData],
        Command::GenMasks => vec![Stage::GenMasks],
        Command::TrainGan => vec![Stage::TrainGan],
        Command::Pretrain => vec![Stage::Pretrain],
        Command::Finetune => vec![Stage::Finetune],
        Command::Eval => vec![Stage::Eval],
        Command::Compare => vec![Stage::Compare],
        Command::Report => vec![Stage::Report],
        Command::All => Stage::ALL.to_vec(),
    }
}

fn exit_code_for(err: &AmclError) -> u8 {
    match err {
        AmclError::InvalidConfig(_) => 2,
        AmclError::MissingArtifact(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let cli = Cli::parse();
    let mut overrides = cli.set.clone();
    if let Some(out) = &cli.output {
        overrides.push(format!("pipeline.output_dir={}", out.display()));
    }
    if let Some(session) = cli.train_session {
        overrides.push(format!("dataset.train_session={session}"));
    }

    let cfg = match ExperimentConfig::load(cli.config.as_deref(), &overrides) {
        Ok(cfg) => cfg,
        Err(err) => {
            eprintln!("config error: {err}");
            return ExitCode::from(2);
        }
    };

    match run_pipeline(&cfg, &stages_for(&cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
