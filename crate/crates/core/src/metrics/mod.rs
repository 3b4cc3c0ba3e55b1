//! Ranking and classification metrics.

pub mod at_k;
pub mod classification;

pub use at_k::{
    cg_at_k, cg_curve, map_at_k, micro_prf_at_k, ndcg_at_k, prf_at_k, report_at_k_table, rows_to_csv,
    topk_relevance, Averaging, EvalPair, KMetricsRow, Prf,
};
pub use classification::{average_precision, classification_report, roc_auc, ClassificationReport, Scores};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("no documents to evaluate")]
    EmptyCorpus,
    #[error("K must be at least 1")]
    ZeroK,
}
