use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use commands::{EvalArgs, LocalizeArgs, Overrides};
use config::RunConfig;

/// Text-guided multi-source sound localization.
#[derive(Debug, Parser)]
#[command(name = "tvsl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration, merged over its `profile`.
    #[arg(long)]
    config: PathBuf,
    /// Seed for initialization and batch order (`synth`: the world seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Condition on every class instead of detected ones.
    #[arg(long)]
    single_stage: bool,
    /// Learnable prompt context rows.
    #[arg(long)]
    prompt_length: Option<usize>,
    /// Only use samples with this many sources (`synth`: test sources).
    #[arg(long)]
    sources: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset and its manifest.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train and write checkpoints plus a JSONL log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Evaluate over a new vocabulary without retraining.
    Zeroshot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        /// Class list, one name per line; defaults to the manifest's unseen
        /// classes.
        #[arg(long)]
        vocabulary: Option<PathBuf>,
    },
    /// Export heatmaps for one sample.
    Localize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sample id from the manifest.
        #[arg(long)]
        sample: String,
        /// Comma-separated class names; defaults to the detected classes.
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<String>>,
        #[arg(long)]
        vocabulary: Option<PathBuf>,
        /// Output directory; defaults to `<output.dir>/heatmaps`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the resolved configuration.
    Config {
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    fn resolve(&self) -> Result<(RunConfig, Overrides)> {
        let ov = Overrides {
            seed: self.seed,
            single_stage: self.single_stage,
            prompt_length: self.prompt_length,
            sources: self.sources,
        };
        let mut cfg = RunConfig::load(&self.config)?;
        ov.apply(&mut cfg);
        cfg.validate()?;
        Ok((cfg, ov))
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Synth { common } => {
            let (cfg, ov) = common.resolve()?;
            commands::synth(&cfg, &ov)
        }
        Command::Train { common, resume } => {
            let (cfg, ov) = common.resolve()?;
            commands::train(&cfg, &ov, resume.as_deref())
        }
        Command::Eval { common, checkpoint, split } => {
            let (cfg, ov) = common.resolve()?;
            let args = EvalArgs { checkpoint: checkpoint.as_deref(), split: split.as_deref(), zero_shot: None };
            commands::eval(&cfg, &ov, &args)
        }
        Command::Zeroshot { common, checkpoint, split, vocabulary } => {
            let (cfg, ov) = common.resolve()?;
            let args = EvalArgs {
                checkpoint: checkpoint.as_deref(),
                split: split.as_deref(),
                zero_shot: Some(vocabulary.as_deref()),
            };
            commands::eval(&cfg, &ov, &args)
        }
        Command::Localize { common, checkpoint, sample, classes, vocabulary, out } => {
            let (cfg, ov) = common.resolve()?;
            let args = LocalizeArgs {
                checkpoint: checkpoint.as_deref(),
                sample,
                classes: classes.clone(),
                vocabulary: vocabulary.as_deref(),
                out: out.as_deref(),
            };
            commands::localize(&cfg, &ov, &args)
        }
        Command::Config { common } => {
            let (cfg, _) = common.resolve()?;
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}
