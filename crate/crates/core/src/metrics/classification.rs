//! Thresholded multi-label classification metrics and ranking AUCs.

use serde::Serialize;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Scores {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub auc_roc: f64,
    pub auc_pr: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub micro: Scores,
    pub macro_: Scores,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. `None` when either class is absent.
pub fn roc_auc(labels: &[bool], scores: &[f64]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // Mann-Whitney U with midranks for ties.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&t| labels[t]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Step-wise area under the precision-recall curve, one step per distinct
/// score threshold. `None` without positives.
pub fn average_precision(labels: &[bool], scores: &[f64]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&y| y).count();
    if n_pos == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Some(ap)
}

#[derive(Default, Clone, Copy)]
struct Confusion {
    tp: usize,
    fp: usize,
    fn_: usize,
}

impl Confusion {
    fn scores(self) -> (f64, f64, f64) {
        let (tp, fp, fn_) = (self.tp as f64, self.fp as f64, self.fn_ as f64);
        (ratio(2.0 * tp, 2.0 * tp + fp + fn_), ratio(tp, tp + fp), ratio(tp, tp + fn_))
    }
}

/// Micro and macro F1, precision, recall, AUC-ROC and AUC-PR for a D×L
/// gold matrix and probability matrix. A label is predicted when its
/// probability is at least `threshold`. Macro F1/P/R average over all L
/// labels; macro AUCs average over labels where they are defined.
pub fn classification_report(gold: &[Vec<bool>], probs: &[Vec<f64>], threshold: f64) -> ClassificationReport {
    assert_eq!(gold.len(), probs.len(), "gold and probability matrices differ in rows");
    let n_labels = gold.first().map_or(0, Vec::len);
    let mut per_label = vec![Confusion::default(); n_labels];
    let mut total = Confusion::default();
    let mut flat_y = Vec::with_capacity(gold.len() * n_labels);
    let mut flat_s = Vec::with_capacity(gold.len() * n_labels);
    for (y_row, p_row) in gold.iter().zip(probs) {
        assert_eq!(y_row.len(), n_labels, "ragged gold matrix");
        assert_eq!(p_row.len(), n_labels, "ragged probability matrix");
        for (l, (&y, &p)) in y_row.iter().zip(p_row).enumerate() {
            let pred = p >= threshold;
            let c = &mut per_label[l];
            match (y, pred) {
                (true, true) => {
                    c.tp += 1;
                    total.tp += 1;
                }
                (false, true) => {
                    c.fp += 1;
                    total.fp += 1;
                }
                (true, false) => {
                    c.fn_ += 1;
                    total.fn_ += 1;
                }
                (false, false) => {}
            }
            flat_y.push(y);
            flat_s.push(p);
        }
    }
    let (f1, precision, recall) = total.scores();
    let micro = Scores {
        f1,
        precision,
        recall,
        auc_roc: roc_auc(&flat_y, &flat_s).unwrap_or(0.0),
        auc_pr: average_precision(&flat_y, &flat_s).unwrap_or(0.0),
    };

    let mut sums = (0.0, 0.0, 0.0);
    let (mut roc_sum, mut roc_n, mut pr_sum, mut pr_n) = (0.0, 0usize, 0.0, 0usize);
    for (l, c) in per_label.iter().enumerate() {
        let (f, p, r) = c.scores();
        sums.0 += f;
        sums.1 += p;
        sums.2 += r;
        let y: Vec<bool> = gold.iter().map(|row| row[l]).collect();
        let s: Vec<f64> = probs.iter().map(|row| row[l]).collect();
        if let Some(a) = roc_auc(&y, &s) {
            roc_sum += a;
            roc_n += 1;
        }
        if let Some(a) = average_precision(&y, &s) {
            pr_sum += a;
            pr_n += 1;
        }
    }
    let nl = n_labels as f64;
    let macro_ = Scores {
        f1: ratio(sums.0, nl),
        precision: ratio(sums.1, nl),
        recall: ratio(sums.2, nl),
        auc_roc: ratio(roc_sum, roc_n as f64),
        auc_pr: ratio(pr_sum, pr_n as f64),
    };
    ClassificationReport { micro, macro_ }
}
