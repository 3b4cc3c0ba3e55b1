//! Metrics at ranking cutoff K.
//!
//! A predicted item at position i ≤ K is relevant when it occurs among the
//! first min(K, |gold|) gold codes. Relevance is binary and DCG uses a
//! log2 discount.

use serde::Serialize;

use super::MetricsError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalPair<T> {
    pub predicted: Vec<T>,
    pub gold: Vec<T>,
}

impl<T> EvalPair<T> {
    pub fn new(predicted: Vec<T>, gold: Vec<T>) -> Self {
        EvalPair { predicted, gold }
    }
}

pub fn topk_relevance<T: PartialEq>(pair: &EvalPair<T>, k: usize) -> Vec<bool> {
    let top_gold = &pair.gold[..k.min(pair.gold.len())];
    pair.predicted
        .iter()
        .take(k)
        .map(|p| top_gold.contains(p))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// How precision and recall at K are pooled over documents.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Hits, retrieved and relevant counts summed over the corpus.
    #[default]
    Micro,
    /// Per-document precision and recall averaged (documents with an empty
    /// denominator contribute 0); F1 is their harmonic mean.
    PerDocument,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Micro-averaged precision, recall and F1 at K.
pub fn micro_prf_at_k<T: PartialEq>(pairs: &[EvalPair<T>], k: usize) -> Result<Prf, MetricsError> {
    prf_at_k(pairs, k, Averaging::Micro)
}

pub fn prf_at_k<T: PartialEq>(pairs: &[EvalPair<T>], k: usize, mode: Averaging) -> Result<Prf, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    let counts = pairs.iter().map(|p| {
        let hits = topk_relevance(p, k).iter().filter(|&&r| r).count();
        (hits, p.predicted.len().min(k), p.gold.len().min(k))
    });
    match mode {
        Averaging::Micro => {
            let (mut h, mut np, mut ng) = (0usize, 0usize, 0usize);
            for (a, b, c) in counts {
                h += a;
                np += b;
                ng += c;
            }
            // 2h/(np+ng) is the harmonic mean of h/np and h/ng, written so
            // that P = R = F1 holds exactly whenever np == ng.
            Ok(Prf {
                precision: ratio(h as f64, np as f64),
                recall: ratio(h as f64, ng as f64),
                f1: ratio(2.0 * h as f64, (np + ng) as f64),
            })
        }
        Averaging::PerDocument => {
            let n = pairs.len() as f64;
            let (mut p, mut r) = (0.0, 0.0);
            for (h, np, ng) in counts {
                p += ratio(h as f64, np as f64);
                r += ratio(h as f64, ng as f64);
            }
            let (p, r) = (p / n, r / n);
            Ok(Prf {
                precision: p,
                recall: r,
                f1: ratio(2.0 * p * r, p + r),
            })
        }
    }
}

fn mean_over_gold<T>(pairs: &[EvalPair<T>], per_doc: impl Fn(&EvalPair<T>) -> f64) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for p in pairs.iter().filter(|p| !p.gold.is_empty()) {
        total += per_doc(p);
        n += 1;
    }
    ratio(total, n as f64)
}

fn average_precision_at_k<T: PartialEq>(pair: &EvalPair<T>, k: usize) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, rel) in topk_relevance(pair, k).into_iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / k.min(pair.gold.len()) as f64
}

/// Mean over documents with gold codes of AP@K, normalized by
/// min(K, |gold|).
pub fn map_at_k<T: PartialEq>(pairs: &[EvalPair<T>], k: usize) -> f64 {
    mean_over_gold(pairs, |p| average_precision_at_k(p, k))
}

fn discount(i: usize) -> f64 {
    1.0 / ((i + 2) as f64).log2()
}

fn ndcg_doc<T: PartialEq>(pair: &EvalPair<T>, k: usize) -> f64 {
    let dcg: f64 = topk_relevance(pair, k)
        .into_iter()
        .enumerate()
        .filter(|(_, r)| *r)
        .map(|(i, _)| discount(i))
        .sum();
    let idcg: f64 = (0..k.min(pair.gold.len())).map(discount).sum();
    dcg / idcg
}

pub fn ndcg_at_k<T: PartialEq>(pairs: &[EvalPair<T>], k: usize) -> f64 {
    mean_over_gold(pairs, |p| ndcg_doc(p, k))
}

/// Mean of NDCG@k for k = 1..=K.
pub fn cg_at_k<T: PartialEq>(pairs: &[EvalPair<T>], k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    (1..=k).map(|j| ndcg_at_k(pairs, j)).sum::<f64>() / k as f64
}

/// (k, CG_k) for k = 1..=max_k, computed incrementally.
pub fn cg_curve<T: PartialEq>(pairs: &[EvalPair<T>], max_k: usize) -> Vec<(usize, f64)> {
    let mut acc = 0.0;
    (1..=max_k)
        .map(|k| {
            acc += ndcg_at_k(pairs, k);
            (k, acc / k as f64)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KMetricsRow {
    pub k: usize,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub map: f64,
    pub ndcg: f64,
    pub cg: f64,
}

pub fn report_at_k_table<T: PartialEq>(
    pairs: &[EvalPair<T>],
    ks: &[usize],
    mode: Averaging,
) -> Result<Vec<KMetricsRow>, MetricsError> {
    ks.iter()
        .map(|&k| {
            let prf = prf_at_k(pairs, k, mode)?;
            Ok(KMetricsRow {
                k,
                f1: prf.f1,
                precision: prf.precision,
                recall: prf.recall,
                map: map_at_k(pairs, k),
                ndcg: ndcg_at_k(pairs, k),
                cg: cg_at_k(pairs, k),
            })
        })
        .collect()
}

pub fn rows_to_csv(rows: &[KMetricsRow]) -> String {
    let mut out = String::from("K,F1,Prec,Rec,MAP,NDCG,CG\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.k, r.f1, r.precision, r.recall, r.map, r.ndcg, r.cg
        ));
    }
    out
}
