//! Beam search over a step-wise next-token distribution.
//!
//! Each step fills beam slots in order. Slot `j` takes the best expansion
//! not yet taken among the children of the previous step's slots `0..=j`.
//! A wider beam therefore reproduces every slot of a narrower one, so the
//! best score found never decreases with width; width 1 is greedy
//! decoding, and a width at least the number of prefixes explores
//! everything. Expansions that emit end-of-sequence, or reach `max_len`
//! tokens, are finished and keep their slot empty afterwards.

use std::cmp::Ordering;

/// Supplies next-token log-probabilities for a prefix of output ids.
pub trait StepScorer {
    /// Log-probabilities over the whole output vocabulary.
    fn log_probs(&mut self, prefix: &[usize]) -> Vec<f64>;
    fn eos(&self) -> usize;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated ids, end-of-sequence excluded.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// False when the hypothesis was cut off at `max_len`.
    pub ended: bool,
}

impl Hypothesis {
    /// Length counted in decoder steps.
    fn steps(&self) -> usize {
        self.tokens.len() + usize::from(self.ended)
    }
}

/// Higher score first, then fewer steps, then lexicographically smaller ids.
pub fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_prob
        .total_cmp(&a.log_prob)
        .then(a.steps().cmp(&b.steps()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

struct Live {
    tokens: Vec<usize>,
    log_prob: f64,
}

/// Finished hypotheses, best first. `max_len` counts decoder steps,
/// end-of-sequence included.
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &mut S, width: usize, max_len: usize) -> Vec<Hypothesis> {
    assert!(width >= 1, "beam width must be positive");
    assert!(max_len >= 1, "max_len must be positive");
    let eos = scorer.eos();
    let mut slots: Vec<Option<Live>> = vec![Some(Live {
        tokens: Vec::new(),
        log_prob: 0.0,
    })];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        // children of each slot, best first
        let mut children: Vec<Vec<(f64, usize)>> = Vec::with_capacity(slots.len());
        for slot in &slots {
            let mut c = match slot {
                Some(live) => scorer
                    .log_probs(&live.tokens)
                    .into_iter()
                    .enumerate()
                    .map(|(t, lp)| (live.log_prob + lp, t))
                    .collect(),
                None => Vec::new(),
            };
            c.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            children.push(c);
        }
        let mut cursor = vec![0usize; slots.len()];
        let mut next: Vec<Option<Live>> = Vec::with_capacity(width);
        for j in 0..width {
            // best remaining child among parents 0..=j
            let mut best: Option<(usize, f64, usize)> = None;
            for p in 0..=j.min(slots.len() - 1) {
                let Some(&(score, tok)) = children[p].get(cursor[p]) else { continue };
                let better = match best {
                    None => true,
                    Some((bp, bs, bt)) => {
                        let ord = score.total_cmp(&bs);
                        ord == Ordering::Greater || (ord == Ordering::Equal && {
                            let parent = &slots[p].as_ref().unwrap().tokens;
                            let bparent = &slots[bp].as_ref().unwrap().tokens;
                            (parent, tok) < (bparent, bt)
                        })
                    }
                };
                if better {
                    best = Some((p, score, tok));
                }
            }
            let Some((p, score, tok)) = best else {
                next.push(None);
                continue;
            };
            cursor[p] += 1;
            let mut tokens = slots[p].as_ref().unwrap().tokens.clone();
            if tok == eos {
                finished.push(Hypothesis {
                    tokens,
                    log_prob: score,
                    ended: true,
                });
                next.push(None);
                continue;
            }
            tokens.push(tok);
            if tokens.len() >= max_len {
                finished.push(Hypothesis {
                    tokens,
                    log_prob: score,
                    ended: false,
                });
                next.push(None);
            } else {
                next.push(Some(Live { tokens, log_prob: score }));
            }
        }
        while matches!(next.last(), Some(None)) {
            next.pop();
        }
        slots = next;
        let best_live = slots.iter().flatten().map(|l| l.log_prob).fold(f64::NEG_INFINITY, f64::max);
        let best_done = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        // log-probabilities only fall as prefixes grow
        if slots.is_empty() || best_done >= best_live {
            break;
        }
    }
    finished.sort_by(rank);
    finished
}

/// Picks the most likely next token (lowest id on ties) until
/// end-of-sequence or `max_len` steps.
pub fn greedy<S: StepScorer + ?Sized>(scorer: &mut S, max_len: usize) -> Hypothesis {
    let eos = scorer.eos();
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    loop {
        let lp = scorer.log_probs(&tokens);
        let (tok, &best) = lp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty vocabulary");
        log_prob += best;
        if tok == eos {
            return Hypothesis {
                tokens,
                log_prob,
                ended: true,
            };
        }
        tokens.push(tok);
        if tokens.len() >= max_len {
            return Hypothesis {
                tokens,
                log_prob,
                ended: false,
            };
        }
    }
}
