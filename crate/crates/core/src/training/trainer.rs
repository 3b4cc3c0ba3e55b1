//! Two-phase training.
//!
//! Phase 1 trains the whole network on `focal + alpha * generative`.
//! Phase 2 freezes the encoder and decoder and trains only the classifier
//! head on the Dice loss. Both phases evaluate validation micro-F1 of the
//! classifier head after every epoch and keep the best parameters seen,
//! the starting point included.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use ltricd_tensor::{
    Adafactor, AdafactorConfig, Adam, AdamConfig, GradStore, Optimizer, OptimizerState, Tape, Tensor,
};

use super::checkpoint::Checkpoint;
use super::losses::{combined_loss, dice_loss, focal_loss, generative_nll};
use crate::corpus::deid::SurrogateRules;
use crate::corpus::tokenize::{pad_or_truncate, TokenVocabulary};
use crate::corpus::{CodedDocument, CorpusSplits};
use crate::icd::CodeVocabulary;
use crate::model::decoder::teacher_forcing;
use crate::model::encoder::encode_values;
use crate::model::{
    classifier_logits, decoder_log_probs, decoder_memory, encode, is_head, Model, ModelConfig, ModelError,
};
use crate::ordering::{build_target_sequence, OrderingStrategy};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("phase {phase}, epoch {epoch}: non-finite {what}")]
    Divergence { phase: u8, epoch: usize, what: String },
    #[error("invalid training configuration: {0}")]
    Config(String),
}

impl From<ltricd_tensor::TensorError> for TrainError {
    fn from(e: ltricd_tensor::TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Adafactor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub batch_size: usize,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub seed: u64,
    pub dice_epsilon: f64,
    /// Probability at which a label counts as predicted.
    pub threshold: f64,
    pub optimizer: OptimizerKind,
    /// Also report training-split micro-F1 after every epoch.
    pub eval_train: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.02,
            gamma: 2.0,
            lr_phase1: 1e-3,
            lr_phase2: 1e-4,
            batch_size: 6,
            epochs_phase1: 20,
            epochs_phase2: 20,
            seed: 0,
            dice_epsilon: 1e-8,
            threshold: 0.5,
            optimizer: OptimizerKind::Adam,
            eval_train: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.alpha >= 0.0) {
            return bad("alpha must be non-negative");
        }
        if !(self.gamma >= 0.0) {
            return bad("gamma must be non-negative");
        }
        if !(self.lr_phase1 > 0.0 && self.lr_phase2 > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        if !(self.dice_epsilon >= 0.0) {
            return bad("dice_epsilon must be non-negative");
        }
        Ok(())
    }

    fn optimizer(&self, lr: f64) -> Box<dyn Optimizer + Send> {
        match self.optimizer {
            OptimizerKind::Adam => Box::new(Adam::new(AdamConfig::with_lr(lr))),
            OptimizerKind::Adafactor => Box::new(Adafactor::new(AdafactorConfig::with_lr(lr))),
        }
    }
}

/// A document ready for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub id: String,
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    /// Multi-hot gold labels over the code vocabulary.
    pub labels: Vec<f64>,
    /// Gold code ids in target-sequence order.
    pub target: Vec<usize>,
}

/// Surrogate replacement, tokenization, padding, and label encoding.
pub fn prepare(
    docs: &[CodedDocument],
    codes: &CodeVocabulary,
    tokens: &TokenVocabulary,
    rules: &SurrogateRules,
    max_input_len: usize,
    ordering: OrderingStrategy,
) -> Vec<Prepared> {
    docs.iter()
        .map(|d| {
            let ids = tokens.tokenize(&rules.replace(&d.text));
            let padded = pad_or_truncate(&ids, max_input_len);
            let target: Vec<usize> = build_target_sequence(d, ordering)
                .iter()
                .filter_map(|c| {
                    let id = codes.id(c);
                    if id.is_none() {
                        log::warn!("document {}: code {} is outside the vocabulary", d.id, c.display());
                    }
                    id
                })
                .collect();
            let mut labels = vec![0.0; codes.len()];
            for &t in &target {
                labels[t] = 1.0;
            }
            Prepared {
                id: d.id.clone(),
                ids: padded.ids.into_iter().map(|i| i as usize).collect(),
                mask: padded.mask,
                labels,
                target,
            }
        })
        .collect()
}

/// Prepared splits plus the vocabularies they were encoded with.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub codes: CodeVocabulary,
    pub tokens: TokenVocabulary,
    pub ordering: OrderingStrategy,
    pub train: Vec<Prepared>,
    pub validation: Vec<Prepared>,
}

impl TrainingData {
    /// Builds both vocabularies (codes from every split, tokens from the
    /// training split) and prepares the training and validation splits.
    pub fn build(
        splits: &CorpusSplits,
        rules: &SurrogateRules,
        min_token_count: usize,
        max_input_len: usize,
        ordering: OrderingStrategy,
    ) -> Self {
        let codes = splits.code_vocabulary();
        let texts: Vec<String> = splits.train.iter().map(|d| rules.replace(&d.text).into_owned()).collect();
        let tokens = TokenVocabulary::build(texts.iter().map(String::as_str), min_token_count);
        let train = prepare(&splits.train, &codes, &tokens, rules, max_input_len, ordering);
        let validation = prepare(&splits.validation, &codes, &tokens, rules, max_input_len, ordering);
        TrainingData {
            codes,
            tokens,
            ordering,
            train,
            validation,
        }
    }
}

/// One JSON-lines record of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub phase: u8,
    pub epoch: usize,
    pub split: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub focal: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generative: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub micro_f1: Option<f64>,
}

impl EpochLog {
    fn eval(phase: u8, epoch: usize, split: &'static str, f1: f64) -> Self {
        EpochLog {
            phase,
            epoch,
            split,
            loss: None,
            focal: None,
            generative: None,
            dice: None,
            micro_f1: Some(f1),
        }
    }
}

/// Micro-F1 of thresholded probabilities against multi-hot labels.
pub fn micro_f1(probs: &[Vec<f64>], labels: &[&[f64]], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, y) in probs.iter().zip(labels) {
        for (&pi, &yi) in p.iter().zip(y.iter()) {
            match (pi >= threshold, yi > 0.5) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        0.0
    } else {
        2.0 * tp as f64 / den as f64
    }
}

/// Classifier probabilities for hidden states `h`.
fn head_probs(model: &Model, h: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape, |_| false);
    let hv = tape.constant(h.clone());
    let out = classifier_logits(&mut tape, &b, hv)?;
    let p = tape.sigmoid(out.logits)?;
    Ok(tape.value(p)?.data().to_vec())
}

pub fn classifier_probs(model: &Model, ex: &Prepared) -> Result<Vec<f64>> {
    let h = encode_values(model, &ex.ids, &ex.mask)?;
    head_probs(model, &h)
}

#[derive(Clone, Copy, Default)]
struct Terms {
    loss: f64,
    focal: f64,
    generative: f64,
    dice: f64,
}

fn phase1_example(model: &Model, ex: &Prepared, cfg: &TrainConfig) -> Result<(Terms, GradStore)> {
    let mc = &model.config;
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape, |_| true);
    let h = encode(&mut tape, &b, mc, &ex.ids, &ex.mask)?;
    let head = classifier_logits(&mut tape, &b, h)?;
    let lc = focal_loss(&mut tape, head.logits, &ex.labels, cfg.gamma)?;
    let mem = decoder_memory(&mut tape, &b, h, &ex.mask)?;
    let (inputs, targets) = teacher_forcing(mc, &ex.target)?;
    let lp = decoder_log_probs(&mut tape, &b, mc, &mem, &inputs)?;
    let lg = generative_nll(&mut tape, lp, &targets)?;
    let loss = combined_loss(&mut tape, lc, lg, cfg.alpha)?;
    tape.backward(loss)?;
    let value = |v| -> Result<f64> { Ok(tape.value(v)?.item()?) };
    let terms = Terms {
        loss: value(loss)?,
        focal: value(lc)?,
        generative: value(lg)?,
        dice: 0.0,
    };
    Ok((terms, b.gradients(&tape)))
}

fn phase2_example(model: &Model, h: &Tensor, ex: &Prepared, cfg: &TrainConfig) -> Result<(Terms, GradStore)> {
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape, is_head);
    let hv = tape.constant(h.clone());
    let head = classifier_logits(&mut tape, &b, hv)?;
    let loss = dice_loss(&mut tape, head.block1, head.block2, &ex.labels, cfg.dice_epsilon)?;
    tape.backward(loss)?;
    let l = tape.value(loss)?.item()?;
    let terms = Terms {
        loss: l,
        dice: l,
        ..Terms::default()
    };
    Ok((terms, b.gradients(&tape)))
}

/// Best-so-far snapshot.
struct Best {
    model: Model,
    f1: f64,
    epoch: usize,
    optimizer: Option<OptimizerState>,
}

pub struct Trainer<'d> {
    pub cfg: TrainConfig,
    pub data: &'d TrainingData,
    pub log: Vec<EpochLog>,
    /// Model after the final epoch of the latest phase, whether or not
    /// it was selected.
    pub last_model: Option<Model>,
    on_epoch: Option<Box<dyn FnMut(&EpochLog) + 'd>>,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: TrainConfig, data: &'d TrainingData) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            cfg,
            data,
            log: Vec::new(),
            last_model: None,
            on_epoch: None,
        })
    }

    /// Called with every log record as it is produced.
    pub fn on_epoch(&mut self, f: impl FnMut(&EpochLog) + 'd) {
        self.on_epoch = Some(Box::new(f));
    }

    fn record(&mut self, entry: EpochLog) {
        log::info!("{}", serde_json::to_string(&entry).unwrap_or_default());
        if let Some(f) = self.on_epoch.as_mut() {
            f(&entry);
        }
        self.log.push(entry);
    }

    /// Examples used for checkpoint selection: validation, or training
    /// when no validation documents exist.
    fn selection_split(&self) -> (&'d [Prepared], &'static str) {
        if self.data.validation.is_empty() {
            log::warn!("empty validation split; selecting checkpoints on training micro-F1");
            (&self.data.train, "train")
        } else {
            (&self.data.validation, "validation")
        }
    }

    fn eval_f1(&self, model: &Model, examples: &[Prepared], hidden: Option<&[Tensor]>) -> Result<f64> {
        let probs: Vec<Vec<f64>> = examples
            .par_iter()
            .enumerate()
            .map(|(i, ex)| match hidden {
                Some(h) => head_probs(model, &h[i]),
                None => classifier_probs(model, ex),
            })
            .collect::<Result<_>>()?;
        let labels: Vec<&[f64]> = examples.iter().map(|e| e.labels.as_slice()).collect();
        Ok(micro_f1(&probs, &labels, self.cfg.threshold))
    }

    fn new_model_config(&self, base: ModelConfig) -> ModelConfig {
        ModelConfig {
            token_vocab: self.data.tokens.len(),
            n_labels: self.data.codes.len(),
            ..base
        }
    }

    /// Initializes a model sized to the data from `base`'s hyperparameters.
    pub fn init_model(&self, base: ModelConfig) -> Result<Model> {
        Ok(Model::init(self.new_model_config(base), self.cfg.seed)?)
    }

    fn checkpoint(&self, best: Best, phase: u8) -> Checkpoint {
        Checkpoint::new(
            &best.model,
            &self.data.codes,
            &self.data.tokens,
            self.data.ordering,
            phase,
            best.epoch,
            best.f1,
            best.optimizer,
        )
    }

    /// Joint training of all parameters. Returns the checkpoint with the
    /// best selection micro-F1.
    pub fn phase1(&mut self, model: Model) -> Result<Checkpoint> {
        let phase = 1;
        let (sel, sel_name) = self.selection_split();
        let mut model = model;
        let f1 = self.eval_f1(&model, sel, None)?;
        self.record(EpochLog::eval(phase, 0, sel_name, f1));
        let mut best = Best {
            model: model.clone(),
            f1,
            epoch: 0,
            optimizer: None,
        };
        let mut opt = self.cfg.optimizer(self.cfg.lr_phase1);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x7068_6173_6531);
        let train = &self.data.train;
        for epoch in 1..=self.cfg.epochs_phase1 {
            let cfg = self.cfg.clone();
            let terms = run_epoch(&mut model, opt.as_mut(), train.len(), cfg.batch_size, &mut rng, phase, epoch, |m, i| {
                phase1_example(m, &train[i], &cfg)
            })?;
            self.record(EpochLog {
                phase,
                epoch,
                split: "train",
                loss: Some(terms.loss),
                focal: Some(terms.focal),
                generative: Some(terms.generative),
                dice: None,
                micro_f1: if self.cfg.eval_train {
                    Some(self.eval_f1(&model, train, None)?)
                } else {
                    None
                },
            });
            let f1 = self.eval_f1(&model, sel, None)?;
            self.record(EpochLog::eval(phase, epoch, sel_name, f1));
            if f1 > best.f1 {
                best = Best {
                    model: model.clone(),
                    f1,
                    epoch,
                    optimizer: Some(opt.state()),
                };
            }
        }
        self.last_model = Some(model);
        Ok(self.checkpoint(best, phase))
    }

    /// Dice-loss training of the classifier head with encoder and decoder
    /// frozen. Encoder states are computed once up front.
    pub fn phase2(&mut self, model: Model) -> Result<Checkpoint> {
        let phase = 2;
        let (sel, sel_name) = self.selection_split();
        let hidden = |m: &Model, xs: &[Prepared]| -> Result<Vec<Tensor>> {
            Ok(xs.par_iter().map(|e| encode_values(m, &e.ids, &e.mask)).collect::<std::result::Result<_, _>>()?)
        };
        let train = &self.data.train;
        let h_train = hidden(&model, train)?;
        let h_sel = hidden(&model, sel)?;
        let mut model = model;
        let f1 = self.eval_f1(&model, sel, Some(&h_sel))?;
        self.record(EpochLog::eval(phase, 0, sel_name, f1));
        let mut best = Best {
            model: model.clone(),
            f1,
            epoch: 0,
            optimizer: None,
        };
        let mut opt = self.cfg.optimizer(self.cfg.lr_phase2);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x7068_6173_6532);
        for epoch in 1..=self.cfg.epochs_phase2 {
            let cfg = self.cfg.clone();
            let terms = run_epoch(&mut model, opt.as_mut(), train.len(), cfg.batch_size, &mut rng, phase, epoch, |m, i| {
                phase2_example(m, &h_train[i], &train[i], &cfg)
            })?;
            self.record(EpochLog {
                phase,
                epoch,
                split: "train",
                loss: Some(terms.loss),
                focal: None,
                generative: None,
                dice: Some(terms.dice),
                micro_f1: if self.cfg.eval_train {
                    Some(self.eval_f1(&model, train, Some(&h_train))?)
                } else {
                    None
                },
            });
            let f1 = self.eval_f1(&model, sel, Some(&h_sel))?;
            self.record(EpochLog::eval(phase, epoch, sel_name, f1));
            if f1 > best.f1 {
                best = Best {
                    model: model.clone(),
                    f1,
                    epoch,
                    optimizer: Some(opt.state()),
                };
            }
        }
        self.last_model = Some(model);
        Ok(self.checkpoint(best, phase))
    }
}

/// One pass over `n` examples in shuffled minibatches. Per-example
/// gradients are computed in parallel and summed in example order, so the
/// result does not depend on the thread count.
#[allow(clippy::too_many_arguments)]
fn run_epoch<F>(
    model: &mut Model,
    opt: &mut (dyn Optimizer + Send),
    n: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    phase: u8,
    epoch: usize,
    example: F,
) -> Result<Terms>
where
    F: Fn(&Model, usize) -> Result<(Terms, GradStore)> + Sync,
{
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut sums = Terms::default();
    for batch in order.chunks(batch_size) {
        let snapshot = &*model;
        let results: Vec<(Terms, GradStore)> = batch
            .par_iter()
            .map(|&i| example(snapshot, i))
            .collect::<Result<_>>()?;
        let mut grads = GradStore::default();
        for (t, g) in &results {
            if !t.loss.is_finite() {
                return Err(TrainError::Divergence {
                    phase,
                    epoch,
                    what: "loss".into(),
                });
            }
            sums.loss += t.loss;
            sums.focal += t.focal;
            sums.generative += t.generative;
            sums.dice += t.dice;
            grads.accumulate(g);
        }
        grads.scale(1.0 / batch.len() as f64);
        if !grads.all_finite() {
            return Err(TrainError::Divergence {
                phase,
                epoch,
                what: "gradient".into(),
            });
        }
        opt.step(&mut model.params, &grads);
    }
    let n = n.max(1) as f64;
    Ok(Terms {
        loss: sums.loss / n,
        focal: sums.focal / n,
        generative: sums.generative / n,
        dice: sums.dice / n,
    })
}
