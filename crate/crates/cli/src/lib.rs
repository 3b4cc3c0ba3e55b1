//! Batch command-line front end for LTR-ICD runs.

pub mod commands;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod harness;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use ltricd_core::corpus::Split;
use ltricd_core::metrics::Averaging;

use crate::commands::Phase;
use crate::config::RunConfig;
use crate::error::CliError;
use crate::evaluate::Kinds;

#[derive(Debug, Parser)]
#[command(name = "ltricd", version, about = "Joint ICD-9 code classification and ranking")]
pub struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (falls back to LTRICD_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PhaseArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AveragingArg {
    Micro,
    PerDocument,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus (train/validation/test JSONL and stats).
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; phase 1 is joint, phase 2 tunes the classifier head.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        phase: PhaseArg,
        /// Checkpoint to start phase 2 from.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Write generative and classifier predictions for a corpus split.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        max_decode_len: Option<usize>,
    },
    /// Merge generative and classifier predictions into one ranking.
    Merge {
        #[arg(long)]
        generative: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score ranked predictions against the gold codes of a split.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "both")]
        kinds: Kinds,
        #[arg(long, value_delimiter = ',')]
        k_list: Option<Vec<usize>>,
        #[arg(long, value_enum)]
        averaging: Option<AveragingArg>,
        /// Prefix of the report files.
        #[arg(long, default_value = "eval")]
        name: String,
    },
    /// Train one model per ordering strategy and write CG curves.
    CompareOrderings {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        max_decode_len: Option<usize>,
    },
}

/// Thread count from the flag, else LTRICD_THREADS.
pub fn thread_count(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("LTRICD_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("LTRICD_THREADS is not a thread count: `{v}`"))),
        Err(_) => Ok(None),
    }
}

pub fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = load_config(&cli)?;
    let paths = cfg.paths.clone();
    match cli.command {
        Command::Synth { out } => {
            let out = commands::resolve(out, &paths.corpus, "--out")?;
            commands::synth(&cfg, &out)
        }
        Command::Train {
            corpus,
            out,
            phase,
            init,
        } => {
            let corpus = commands::resolve(corpus, &paths.corpus, "--corpus")?;
            let out = commands::resolve(out, &paths.checkpoints, "--out")?;
            let phase = match phase {
                PhaseArg::One => Phase::One,
                PhaseArg::Two => Phase::Two,
                PhaseArg::Both => Phase::Both,
            };
            commands::train(&cfg, &corpus, &out, phase, init.as_deref()).map(|_| ())
        }
        Command::Predict {
            checkpoint,
            corpus,
            split,
            out,
            beam,
            max_decode_len,
        } => {
            let corpus = commands::resolve(corpus, &paths.corpus, "--corpus")?;
            let out = commands::resolve(out, &paths.outputs, "--out")?;
            cfg.beam = beam.unwrap_or(cfg.beam);
            cfg.max_decode_len = max_decode_len.or(cfg.max_decode_len);
            commands::predict(&cfg, &checkpoint, &corpus, split, &out)
        }
        Command::Merge {
            generative,
            classifier,
            out,
        } => commands::merge(&generative, &classifier, &out),
        Command::Evaluate {
            predictions,
            corpus,
            split,
            out,
            kinds,
            k_list,
            averaging,
            name,
        } => {
            let corpus = commands::resolve(corpus, &paths.corpus, "--corpus")?;
            let out = commands::resolve(out, &paths.outputs, "--out")?;
            if let Some(k) = k_list {
                cfg.k_list = k;
            }
            match averaging {
                Some(AveragingArg::Micro) => cfg.averaging = Averaging::Micro,
                Some(AveragingArg::PerDocument) => cfg.averaging = Averaging::PerDocument,
                None => {}
            }
            commands::evaluate_cmd(&cfg, &predictions, &corpus, split, kinds, &out, &name)
        }
        Command::CompareOrderings {
            corpus,
            out,
            max_decode_len,
        } => {
            let corpus = commands::resolve(corpus, &paths.corpus, "--corpus")?;
            let out = commands::resolve(out, &paths.outputs, "--out")?;
            cfg.max_decode_len = max_decode_len.or(cfg.max_decode_len);
            harness::compare_orderings_cmd(&cfg, &corpus, &out).map(|_| ())
        }
    }
}
