mod config;
mod error;
mod models;
mod pipeline;
mod reporting;
mod store;

use std::fmt::Display;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use civic_lens::hiernet::FusionKind;
use civic_lens::trainer::ModelKind;
use clap::{Parser, Subcommand};
use serde_json::json;

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};
use crate::pipeline::{Ctx, StageOutcome};
use crate::store::Workspace;

/// Pipeline for telling misinformation posters apart from active citizens
/// by their post histories.
///
/// Each stage writes into the runs directory with a manifest recording the
/// config hash it was built from. Rerunning a stage with an unchanged config
/// does nothing unless --force is given.
#[derive(Parser, Debug)]
#[command(name = "civic-lens", version)]
struct Cli {
    /// TOML config file. Built-in defaults apply without one.
    #[arg(long, global = true, env = "CIVIC_LENS_CONFIG")]
    config: Option<PathBuf>,

    /// Runs directory; overrides `paths.runs` in the config.
    #[arg(long, global = true, env = "CIVIC_LENS_RUNS")]
    out: Option<PathBuf>,

    /// Rebuild the stage even if its outputs are current.
    #[arg(long, global = true)]
    force: bool,

    /// Train, evaluate or explain only this seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// lr-bow, lr-lexicon, bilstm-att, trunc-transformer or hier-transformer.
    #[arg(long, global = true, value_parser = parse::<ModelKind>)]
    model: Option<ModelKind>,

    /// Chunk fusion for hier-transformer: max, mean or lstm.
    #[arg(long, global = true, value_parser = parse::<FusionKind>)]
    fusion: Option<FusionKind>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Load and filter the labeled JSONL corpus at `paths.data`.
    Ingest,
    /// Generate a synthetic corpus with planted class-marker tokens.
    Synth,
    /// Per-class user, post and token statistics.
    Summarize,
    /// Split users and normalize their histories.
    Preprocess,
    /// Build the n-gram, word and lexicon vocabularies and export features.
    Featurize,
    /// Train the configured model for every seed.
    Train,
    /// Score trained checkpoints on the test split.
    Evaluate,
    /// Token attributions for the test users.
    Explain,
    /// Correlate n-gram and lexicon features with the class label.
    Analyze,
    /// Results table, significance tests and feature rankings.
    Report,
    /// Print the effective configuration as TOML.
    Config,
}

fn parse<T: FromStr>(s: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Synth => "synth",
            Command::Summarize => "summarize",
            Command::Preprocess => "preprocess",
            Command::Featurize => "featurize",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Explain => "explain",
            Command::Analyze => "analyze",
            Command::Report => "report",
            Command::Config => "config",
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(out) = &cli.out {
        cfg.paths.runs = out.clone();
    }
    if let Some(kind) = cli.model {
        cfg.model.kind = kind;
    }
    if let Some(fusion) = cli.fusion {
        cfg.model.fusion = fusion;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<Option<StageOutcome>> {
    let cfg = load_config(cli)?;
    if let Command::Config = cli.command {
        let text = toml::to_string_pretty(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
        print!("{text}");
        return Ok(None);
    }
    cfg.validate()?;
    let ws = Workspace::open(&cfg.paths.runs)?;
    let mut ctx = Ctx {
        cfg,
        ws,
        force: cli.force,
        seed: cli.seed,
    };
    let stage = match cli.command {
        Command::Ingest => pipeline::run_ingest,
        Command::Synth => pipeline::run_synth,
        Command::Summarize => pipeline::run_summarize,
        Command::Preprocess => pipeline::run_preprocess,
        Command::Featurize => pipeline::run_featurize,
        Command::Train => models::run_train,
        Command::Evaluate => models::run_evaluate,
        Command::Explain => models::run_explain,
        Command::Analyze => reporting::run_analyze,
        Command::Report => reporting::run_report,
        Command::Config => unreachable!("handled above"),
    };
    stage(&mut ctx).map(Some)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            eprintln!(
                "{}",
                json!({ "error": { "kind": "usage", "stage": null, "message": msg.trim() } })
            );
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(Some(outcome)) => {
            println!("{}", serde_json::to_string(&outcome).expect("outcome serializes"));
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            let stage = match &e {
                CliError::MissingArtifact { stage, .. } | CliError::StaleArtifact { stage, .. } => stage.clone(),
                _ => cli.command.name().to_string(),
            };
            eprintln!(
                "{}",
                json!({ "error": { "kind": e.kind(), "stage": stage, "message": e.to_string() } })
            );
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
