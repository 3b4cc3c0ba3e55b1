use ltricd_tensor::{Bindings, Tape};

use super::beam::StepScorer;
use super::{classifier_logits, decoder_log_probs, decoder_memory, encode, DecoderMemory, Model, Result};

/// One document encoded once, then queried for classifier probabilities
/// and decoder steps. Step computations are recorded past a fixed tape
/// mark and discarded after each query.
pub struct InferenceSession<'m> {
    model: &'m Model,
    tape: Tape,
    bindings: Bindings,
    memory: DecoderMemory,
    probs: Vec<f64>,
    mark: usize,
}

impl<'m> InferenceSession<'m> {
    pub fn new(model: &'m Model, ids: &[usize], mask: &[bool]) -> Result<Self> {
        let mut tape = Tape::new();
        let bindings = model.params.bind(&mut tape, |_| false);
        let h = encode(&mut tape, &bindings, &model.config, ids, mask)?;
        let head = classifier_logits(&mut tape, &bindings, h)?;
        let p = tape.sigmoid(head.logits)?;
        let probs = tape.value(p)?.data().to_vec();
        let memory = decoder_memory(&mut tape, &bindings, h, mask)?;
        let mark = tape.len();
        Ok(InferenceSession {
            model,
            tape,
            bindings,
            memory,
            probs,
            mark,
        })
    }

    /// Sigmoid probability per label.
    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    /// Next-token log-probabilities after `prefix` (code ids, no start
    /// symbol).
    pub fn step(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let cfg = &self.model.config;
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(cfg.bos());
        inputs.extend_from_slice(prefix);
        let lp = decoder_log_probs(&mut self.tape, &self.bindings, cfg, &self.memory, &inputs);
        let out = lp.and_then(|lp| {
            let v = self.tape.value(lp)?;
            Ok(v.row(prefix.len()).to_vec())
        });
        self.tape.truncate(self.mark);
        out
    }
}

impl StepScorer for InferenceSession<'_> {
    fn log_probs(&mut self, prefix: &[usize]) -> Vec<f64> {
        self.step(prefix).expect("decoder step within configured limits")
    }

    fn eos(&self) -> usize {
        self.model.config.eos()
    }
}
