//! Ranked-list evaluation against a gold corpus split.

use ltricd_core::corpus::CodedDocument;
use ltricd_core::icd::{CodeKind, IcdCode};
use ltricd_core::metrics::{cg_curve, report_at_k_table, rows_to_csv, Averaging, EvalPair, KMetricsRow};
use ltricd_core::ordering::{build_target_sequence, OrderingStrategy};
use ltricd_core::ranking::{join_by_id, RankedPrediction};
use serde::Serialize;

use crate::error::CliError;

/// Which code kinds get their own report; a combined report is always
/// produced as well.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kinds {
    Diagnosis,
    Procedure,
    Both,
}

impl Kinds {
    pub fn list(self) -> &'static [CodeKind] {
        match self {
            Kinds::Diagnosis => &[CodeKind::Diagnosis],
            Kinds::Procedure => &[CodeKind::Procedure],
            Kinds::Both => &CodeKind::ALL,
        }
    }
}

impl std::str::FromStr for Kinds {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "diag" | "diagnosis" => Ok(Kinds::Diagnosis),
            "proc" | "procedure" => Ok(Kinds::Procedure),
            "both" => Ok(Kinds::Both),
            _ => Err(format!("unknown kinds `{s}` (expected diag, proc or both)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScopeReport {
    /// `diagnosis`, `procedure` or `combined`.
    pub scope: String,
    pub documents: usize,
    pub rows: Vec<KMetricsRow>,
    /// (k, CG_k) for k up to the largest K requested.
    pub cg_curve: Vec<(usize, f64)>,
}

impl ScopeReport {
    pub fn csv(&self) -> String {
        rows_to_csv(&self.rows)
    }

    pub fn cg_csv(&self) -> String {
        let mut out = String::from("k,cg\n");
        for (k, cg) in &self.cg_curve {
            out.push_str(&format!("{k},{cg:.6}\n"));
        }
        out
    }
}

/// Gold list in priority order: interleaved by rank across kinds, which
/// keeps the seq order within each kind.
pub fn gold_ranking(doc: &CodedDocument) -> Vec<IcdCode> {
    build_target_sequence(doc, OrderingStrategy::InterleavedByPriority)
}

/// Evaluation pairs in prediction order, restricted to `kind` if given.
pub fn pairs_for(
    preds: &[RankedPrediction],
    gold: &[CodedDocument],
    kind: Option<CodeKind>,
) -> Result<Vec<EvalPair<IcdCode>>, CliError> {
    let gold_preds: Vec<RankedPrediction> = gold.iter().map(|d| RankedPrediction::new(d.id.clone(), gold_ranking(d))).collect();
    let keep = |c: &IcdCode| kind.is_none_or(|k| c.kind() == k);
    Ok(join_by_id(&gold_preds, preds)?
        .into_iter()
        .map(|(g, p)| {
            EvalPair::new(
                p.codes.iter().filter(|c| keep(c)).cloned().collect(),
                g.codes.iter().filter(|c| keep(c)).cloned().collect(),
            )
        })
        .collect())
}

pub fn evaluate(
    preds: &[RankedPrediction],
    gold: &[CodedDocument],
    kinds: Kinds,
    k_list: &[usize],
    averaging: Averaging,
) -> Result<Vec<ScopeReport>, CliError> {
    let scopes = kinds.list().iter().map(|&k| Some(k)).chain([None]);
    let max_k = k_list.iter().copied().max().unwrap_or(0);
    scopes
        .map(|kind| {
            let scope = kind.map_or("combined".to_string(), |k| k.to_string());
            let pairs = pairs_for(preds, gold, kind)?;
            if !pairs.is_empty() && pairs.iter().all(|p| p.predicted.is_empty()) {
                log::warn!("{scope}: every prediction list is empty; ranking metrics are 0");
            }
            Ok(ScopeReport {
                scope,
                documents: pairs.len(),
                rows: report_at_k_table(&pairs, k_list, averaging)?,
                cg_curve: cg_curve(&pairs, max_k),
            })
        })
        .collect()
}
