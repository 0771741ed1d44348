mod artifact;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use crate::artifact::MissingArtifact;
use crate::config::{ConfigError, PipelineConfig, SEED_ENV};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    /// Normalize the raw parallel corpus into tokenized text
    Clean,
    /// Build source and target vocabularies
    Vocab,
    /// Train skip-gram embeddings for both sides
    Embed,
    /// Learn a morph lexicon and segment the target side
    Segment,
    /// Train the attention encoder-decoder
    Train,
    /// Translate the input file with a trained checkpoint
    Translate,
    /// Score translations against references
    ScoreBleu,
    /// Intra-annotator agreement from judgment records
    ScoreKappa,
    /// Render stored attention matrices as heatmaps
    ExportAttention,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Clean => "clean",
            Self::Vocab => "vocab",
            Self::Embed => "embed",
            Self::Segment => "segment",
            Self::Train => "train",
            Self::Translate => "translate",
            Self::ScoreBleu => "score-bleu",
            Self::ScoreKappa => "score-kappa",
            Self::ExportAttention => "export-attention",
        }
    }
}

/// Morphology-aware neural machine translation pipeline.
///
/// Every stage reads its inputs and writes its artifacts at the paths named
/// in the config. Any config key can be overridden as `--section.key value`.
#[derive(Debug, Parser)]
#[command(name = "morphnmt", version)]
struct Cli {
    #[arg(value_enum)]
    stage: Stage,
    /// INI-style pipeline configuration
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// `--section.key value` overrides
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match PipelineConfig::load(cli.config.as_deref(), &cli.overrides, std::env::var(SEED_ENV).ok()) {
        Ok(cfg) => cfg,
        Err(ConfigError(msg)) => {
            eprintln!("morphnmt: config error: {msg}");
            return ExitCode::from(1);
        }
    };
    match commands::run(cli.stage, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("morphnmt {}: {err:#}", cli.stage.name());
            if err.downcast_ref::<MissingArtifact>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
