//! Subcommand implementations. Each is a function of its configuration
//! and input files and writes its outputs into a directory.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ltricd_core::corpus::synth::generate_synthetic_corpus;
use ltricd_core::corpus::{CorpusSplits, Split};
use ltricd_core::icd::CodeVocabulary;
use ltricd_core::metrics::classification_report;
use ltricd_core::model::{is_decoder, is_encoder, is_head, Model};
use ltricd_core::predict::{predict_all, DocumentPrediction};
use ltricd_core::ranking::{merge_predictions, read_predictions, write_predictions, RankedPrediction};
use ltricd_core::training::{param_digest, prepare, Checkpoint, Trainer, TrainingData};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::evaluate::{evaluate, Kinds};

pub const PHASE1_CHECKPOINT: &str = "phase1.ckpt.json";
pub const PHASE2_CHECKPOINT: &str = "phase2.ckpt.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const DIGESTS: &str = "digests.json";
pub const GENERATIVE: &str = "generative.jsonl";
pub const CLASSIFIER: &str = "classifier.jsonl";
pub const GENERATIONS: &str = "generations.jsonl";
pub const CLASSIFICATION: &str = "classification.json";
pub const STATS: &str = "stats.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    One,
    Two,
    Both,
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    write_file(path, text)
}

/// The path given on the command line, else the configured one.
pub fn resolve(flag: Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| configured.clone())
        .ok_or_else(|| CliError::Usage(format!("missing {what}")))
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let splits = generate_synthetic_corpus(&cfg.synth, cfg.seed)?;
    create_dir(out)?;
    splits.write_dir(out)?;
    write_json(
        &out.join(STATS),
        &json!({
            "seed": cfg.seed,
            "all": splits.stats(),
            "train": ltricd_core::corpus::CorpusStats::of(&splits.train),
            "validation": ltricd_core::corpus::CorpusStats::of(&splits.validation),
            "test": ltricd_core::corpus::CorpusStats::of(&splits.test),
            "targets": { "diagnosis": cfg.synth.diagnosis_count, "procedure": cfg.synth.procedure_count },
        }),
    )
}

#[derive(Serialize)]
struct Digests {
    encoder: String,
    decoder: String,
    head: String,
}

fn digests(model: &Model) -> Digests {
    Digests {
        encoder: param_digest(&model.params, is_encoder),
        decoder: param_digest(&model.params, is_decoder),
        head: param_digest(&model.params, is_head),
    }
}

/// Training data for continuing from `ck`: its vocabularies, this corpus.
fn data_from_checkpoint(cfg: &RunConfig, ck: &Checkpoint, splits: &CorpusSplits) -> Result<TrainingData, CliError> {
    let codes = ck.code_vocabulary()?;
    if let Some(c) = splits.all().flat_map(|d| d.all_codes()).find(|c| !codes.contains(c)) {
        return Err(CliError::Data(format!("code {} is not in the checkpoint vocabulary", c.display())));
    }
    let rules = cfg.rules()?;
    let n = ck.model.max_input_len;
    Ok(TrainingData {
        train: prepare(&splits.train, &codes, &ck.tokens, &rules, n, ck.ordering),
        validation: prepare(&splits.validation, &codes, &ck.tokens, &rules, n, ck.ordering),
        codes,
        tokens: ck.tokens.clone(),
        ordering: ck.ordering,
    })
}

/// Writes the requested phases' checkpoints, a JSON-lines log and the
/// parameter digests of each saved checkpoint. Returns the path of the
/// last checkpoint written.
pub fn train(cfg: &RunConfig, corpus: &Path, out: &Path, phase: Phase, init: Option<&Path>) -> Result<PathBuf, CliError> {
    let splits = CorpusSplits::load_dir(corpus)?;
    let tcfg = cfg.train_config();
    tcfg.validate()?;
    let (data, start) = match (phase, init) {
        (Phase::Two, Some(p)) => {
            let ck = Checkpoint::load(p)?;
            (data_from_checkpoint(cfg, &ck, &splits)?, Some(ck.model()?))
        }
        (Phase::Two, None) => return Err(CliError::Usage("--phase 2 needs --init CHECKPOINT".into())),
        (_, Some(_)) => return Err(CliError::Usage("--init only applies to --phase 2".into())),
        (_, None) => {
            let data = TrainingData::build(&splits, &cfg.rules()?, cfg.min_token_count, cfg.model.max_input_len, cfg.ordering);
            (data, None)
        }
    };
    if data.train.is_empty() {
        return Err(CliError::Data(format!("{}: empty training split", corpus.display())));
    }
    create_dir(out)?;
    let log_path = out.join(TRAIN_LOG);
    let mut log_file = BufWriter::new(fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?);
    let mut trainer = Trainer::new(tcfg, &data)?;
    trainer.on_epoch(move |entry| {
        let line = serde_json::to_string(entry).expect("log entry serializes");
        if let Err(e) = writeln!(log_file, "{line}").and_then(|_| log_file.flush()) {
            log::error!("cannot write training log: {e}");
        }
    });
    let mut digest_map = serde_json::Map::new();
    let mut last = out.join(PHASE1_CHECKPOINT);
    let mut model = match start {
        Some(m) => m,
        None => trainer.init_model(cfg.model.base())?,
    };
    if phase != Phase::Two {
        let ck = trainer.phase1(model)?;
        ck.save(&last)?;
        model = ck.model()?;
        digest_map.insert("phase1".into(), serde_json::to_value(digests(&model)).expect("digests serialize"));
    }
    if phase != Phase::One {
        let ck = trainer.phase2(model)?;
        last = out.join(PHASE2_CHECKPOINT);
        ck.save(&last)?;
        let m = ck.model()?;
        digest_map.insert("phase2".into(), serde_json::to_value(digests(&m)).expect("digests serialize"));
    }
    write_json(&out.join(DIGESTS), &digest_map)?;
    Ok(last)
}

/// Runs both heads of a checkpoint over one corpus split.
pub fn predict_split(cfg: &RunConfig, ck: &Checkpoint, splits: &CorpusSplits, split: Split) -> Result<(CodeVocabulary, Vec<DocumentPrediction>), CliError> {
    let codes = ck.code_vocabulary()?;
    let model = ck.model()?;
    let docs = splits.get(split);
    let examples = prepare(docs, &codes, &ck.tokens, &cfg.rules()?, model.config.max_input_len, ck.ordering);
    let preds = predict_all(&model, &codes, &examples, &cfg.predict_config())?;
    Ok((codes, preds))
}

pub fn predict(cfg: &RunConfig, checkpoint: &Path, corpus: &Path, split: Split, out: &Path) -> Result<(), CliError> {
    cfg.validate()?;
    let ck = Checkpoint::load(checkpoint)?;
    let splits = CorpusSplits::load_dir(corpus)?;
    let (codes, preds) = predict_split(cfg, &ck, &splits, split)?;
    create_dir(out)?;
    let generative: Vec<RankedPrediction> = preds.iter().map(|p| p.generative.clone()).collect();
    let classifier: Vec<RankedPrediction> = preds.iter().map(|p| p.classifier.clone()).collect();
    write_predictions(&out.join(GENERATIVE), &generative)?;
    write_predictions(&out.join(CLASSIFIER), &classifier)?;
    let mut lines = String::new();
    for (doc, p) in splits.get(split).iter().zip(&preds) {
        lines.push_str(&serde_json::to_string(&json!({"id": doc.id, "text": p.generated})).expect("string serializes"));
        lines.push('\n');
    }
    write_file(&out.join(GENERATIONS), lines)?;
    let gold: Vec<Vec<bool>> = splits
        .get(split)
        .iter()
        .map(|d| {
            let mut row = vec![false; codes.len()];
            for id in d.all_codes().filter_map(|c| codes.id(c)) {
                row[id] = true;
            }
            row
        })
        .collect();
    let probs: Vec<Vec<f64>> = preds.into_iter().map(|p| p.probabilities).collect();
    let report = classification_report(&gold, &probs, cfg.train.threshold);
    write_json(&out.join(CLASSIFICATION), &report)
}

pub fn merge(generative: &Path, classifier: &Path, out: &Path) -> Result<(), CliError> {
    let g = read_predictions(generative, None)?;
    let c = read_predictions(classifier, None)?;
    let merged = merge_predictions(&g, &c)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    Ok(write_predictions(out, &merged)?)
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_cmd(
    cfg: &RunConfig,
    predictions: &Path,
    corpus: &Path,
    split: Split,
    kinds: Kinds,
    out: &Path,
    name: &str,
) -> Result<(), CliError> {
    cfg.validate()?;
    let splits = CorpusSplits::load_dir(corpus)?;
    let vocab = splits.code_vocabulary();
    let preds = read_predictions(predictions, Some(&vocab))?;
    let reports = evaluate(&preds, splits.get(split), kinds, &cfg.k_list, cfg.averaging)?;
    create_dir(out)?;
    for r in &reports {
        write_file(&out.join(format!("{name}_{}.csv", r.scope)), r.csv())?;
        write_file(&out.join(format!("{name}_{}_cg.csv", r.scope)), r.cg_csv())?;
    }
    write_json(&out.join(format!("{name}.json")), &reports)
}
