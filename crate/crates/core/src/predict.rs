//! Per-document inference for both heads.

use rayon::prelude::*;

use crate::icd::CodeVocabulary;
use crate::model::{beam_search, InferenceSession, Model, ModelError};
use crate::ordering::{parse_sequence, serialize_sequence};
use crate::ranking::{classifier_ranked_ids, postprocess_generated, RankedPrediction};
use crate::training::Prepared;

pub const MAX_BEAM: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictConfig {
    pub beam: usize,
    pub threshold: f64,
    /// Decoder step budget, end-of-sequence included; capped by the
    /// model's maximum output length.
    pub max_decode_len: Option<usize>,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            beam: 1,
            threshold: 0.5,
            max_decode_len: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DocumentPrediction {
    /// Best beam hypothesis as semicolon-separated display codes.
    pub generated: String,
    pub generative: RankedPrediction,
    pub classifier: RankedPrediction,
    /// Sigmoid output for every label id.
    pub probabilities: Vec<f64>,
}

pub fn predict_document(
    model: &Model,
    codes: &CodeVocabulary,
    ex: &Prepared,
    cfg: &PredictConfig,
) -> Result<DocumentPrediction, ModelError> {
    let mut session = InferenceSession::new(model, &ex.ids, &ex.mask)?;
    let max_len = cfg
        .max_decode_len
        .unwrap_or(model.config.max_output_len)
        .min(model.config.max_output_len);
    let best = beam_search(&mut session, cfg.beam, max_len).into_iter().next();
    let ids = best.map(|h| h.tokens).unwrap_or_default();
    let seq: Vec<_> = ids.iter().filter_map(|&i| codes.code(i).cloned()).collect();
    let generated = serialize_sequence(&seq);
    let (parsed, rejected) = parse_sequence(&generated, codes);
    let generative = RankedPrediction::new(ex.id.clone(), postprocess_generated(&parsed, &rejected));

    let probs = session.probabilities().to_vec();
    let ranked = classifier_ranked_ids(&probs, cfg.threshold);
    let classifier = RankedPrediction::new(
        ex.id.clone(),
        ranked.iter().map(|&i| codes.code(i).expect("label id in vocabulary").clone()).collect(),
    )
    .with_scores(ranked.iter().map(|&i| probs[i]).collect());
    Ok(DocumentPrediction {
        generated,
        generative,
        classifier,
        probabilities: probs,
    })
}

/// Predictions for every example, in input order.
pub fn predict_all(
    model: &Model,
    codes: &CodeVocabulary,
    examples: &[Prepared],
    cfg: &PredictConfig,
) -> Result<Vec<DocumentPrediction>, ModelError> {
    examples
        .par_iter()
        .map(|ex| predict_document(model, codes, ex, cfg))
        .collect()
}
