//! Post-processing, classifier ranking, and the merge of generative and
//! classifier outputs into one ranked list.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::hash::Hash;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::icd::{CodeKind, CodeVocabulary, IcdCode};

#[derive(Debug, Error)]
pub enum RankingError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}, line {line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("prediction files cover different documents; only in first: {only_first:?}; only in second: {only_second:?}")]
    Join {
        only_first: Vec<String>,
        only_second: Vec<String>,
    },
    #[error("document id {0} appears more than once")]
    DuplicateId(String),
}

/// Keeps the first occurrence of each item.
pub fn dedup_first<T: Eq + Hash + Clone>(items: &[T]) -> Vec<T> {
    let mut seen = HashSet::new();
    items.iter().filter(|x| seen.insert(*x)).cloned().collect()
}

/// Drops repeated codes from a parsed generation. Non-code items are
/// logged and discarded.
pub fn postprocess_generated(decoded: &[IcdCode], rejected: &[String]) -> Vec<IcdCode> {
    if !rejected.is_empty() {
        log::debug!("discarding {} non-code generated item(s): {:?}", rejected.len(), rejected);
    }
    dedup_first(decoded)
}

/// Label ids with probability at least `threshold`, by descending
/// probability and then ascending id.
pub fn classifier_ranked_ids(probs: &[f64], threshold: f64) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] >= threshold).collect();
    ids.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    ids
}

/// Merges two duplicate-free rankings: generative items that the
/// classifier also predicts come first in generative order, followed by
/// the remaining classifier items in classifier order. Generative-only
/// items are dropped, so the output holds exactly the classifier's items.
pub fn merge<T: Eq + Hash + Clone>(generative: &[T], classifier: &[T]) -> Vec<T> {
    let clf: HashSet<&T> = classifier.iter().collect();
    let mut out: Vec<T> = generative.iter().filter(|g| clf.contains(g)).cloned().collect();
    let taken: HashSet<&T> = out.iter().collect();
    let rest: Vec<T> = classifier.iter().filter(|c| !taken.contains(c)).cloned().collect();
    out.extend(rest);
    out
}

/// Stable partition of a ranked list by code kind.
pub fn split_by_kind(codes: &[IcdCode]) -> (Vec<IcdCode>, Vec<IcdCode>) {
    codes.iter().cloned().partition(|c| c.kind() == CodeKind::Diagnosis)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedPrediction {
    pub id: String,
    pub codes: Vec<IcdCode>,
    pub scores: Option<Vec<f64>>,
}

impl RankedPrediction {
    pub fn new(id: impl Into<String>, codes: Vec<IcdCode>) -> Self {
        RankedPrediction {
            id: id.into(),
            codes,
            scores: None,
        }
    }

    pub fn with_scores(mut self, scores: Vec<f64>) -> Self {
        assert_eq!(scores.len(), self.codes.len(), "one score per code");
        self.scores = Some(scores);
        self
    }
}

#[derive(Serialize, Deserialize)]
struct PredictionRecord {
    id: String,
    codes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scores: Option<Vec<f64>>,
}

pub fn write_predictions(path: &Path, preds: &[RankedPrediction]) -> Result<(), RankingError> {
    let io = |source| RankingError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for p in preds {
        let rec = PredictionRecord {
            id: p.id.clone(),
            codes: p.codes.iter().map(IcdCode::display).collect(),
            scores: p.scores.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("prediction serializes")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads predictions, resolving display codes against `vocab` when it
/// knows them and by grammar (diagnosis first) otherwise. Items matching
/// neither are dropped with a warning, as are repeated codes.
pub fn read_predictions(path: &Path, vocab: Option<&CodeVocabulary>) -> Result<Vec<RankedPrediction>, RankingError> {
    let io = |source| RankingError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(&line).map_err(|e| RankingError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        if rec.scores.as_ref().is_some_and(|s| s.len() != rec.codes.len()) {
            return Err(RankingError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                detail: "scores and codes differ in length".into(),
            });
        }
        let mut seen = HashSet::new();
        let mut codes = Vec::new();
        let mut scores = Vec::new();
        for (j, raw) in rec.codes.iter().enumerate() {
            let code = vocab
                .and_then(|v| v.lookup(raw))
                .or_else(|| CodeKind::ALL.iter().find_map(|&k| IcdCode::parse(raw, k).ok()));
            match code {
                Some(c) if seen.insert(c.clone()) => {
                    codes.push(c);
                    if let Some(s) = &rec.scores {
                        scores.push(s[j]);
                    }
                }
                Some(_) => {}
                None => log::warn!("{}: document {}: ignoring non-code `{raw}`", path.display(), rec.id),
            }
        }
        out.push(RankedPrediction {
            id: rec.id,
            codes,
            scores: rec.scores.map(|_| scores),
        });
    }
    Ok(out)
}

/// Pairs up two prediction sets by document id, in the order of `first`.
pub fn join_by_id<'a>(
    first: &'a [RankedPrediction],
    second: &'a [RankedPrediction],
) -> Result<Vec<(&'a RankedPrediction, &'a RankedPrediction)>, RankingError> {
    let mut index: HashMap<&str, &RankedPrediction> = HashMap::new();
    for p in second {
        if index.insert(p.id.as_str(), p).is_some() {
            return Err(RankingError::DuplicateId(p.id.clone()));
        }
    }
    let mut first_ids = HashSet::new();
    for p in first {
        if !first_ids.insert(p.id.as_str()) {
            return Err(RankingError::DuplicateId(p.id.clone()));
        }
    }
    let only_first: Vec<String> = first.iter().filter(|p| !index.contains_key(p.id.as_str())).map(|p| p.id.clone()).collect();
    let only_second: Vec<String> = second.iter().filter(|p| !first_ids.contains(p.id.as_str())).map(|p| p.id.clone()).collect();
    if !only_first.is_empty() || !only_second.is_empty() {
        return Err(RankingError::Join { only_first, only_second });
    }
    Ok(first.iter().map(|p| (p, index[p.id.as_str()])).collect())
}

/// Merges per-document generative and classifier predictions. Output
/// follows the classifier file's document order.
pub fn merge_predictions(
    generative: &[RankedPrediction],
    classifier: &[RankedPrediction],
) -> Result<Vec<RankedPrediction>, RankingError> {
    Ok(join_by_id(classifier, generative)?
        .into_iter()
        .map(|(c, g)| RankedPrediction::new(c.id.clone(), merge(&g.codes, &c.codes)))
        .collect())
}
