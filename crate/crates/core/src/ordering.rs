//! Target label sequences for the generative head.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::CodedDocument;
use crate::icd::{CodeKind, CodeVocabulary, IcdCode};

pub const SEPARATOR: char = ';';

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingStrategy {
    DiagThenProc,
    ProcThenDiag,
    /// d1, p1, d2, p2, ... by per-kind rank; the longer list's remainder
    /// follows in order.
    #[default]
    InterleavedByPriority,
}

impl OrderingStrategy {
    pub const ALL: [OrderingStrategy; 3] = [
        OrderingStrategy::DiagThenProc,
        OrderingStrategy::ProcThenDiag,
        OrderingStrategy::InterleavedByPriority,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OrderingStrategy::DiagThenProc => "diag_then_proc",
            OrderingStrategy::ProcThenDiag => "proc_then_diag",
            OrderingStrategy::InterleavedByPriority => "interleaved",
        }
    }
}

impl fmt::Display for OrderingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OrderingStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        OrderingStrategy::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| format!("unknown ordering `{s}` (expected diag_then_proc, proc_then_diag or interleaved)"))
    }
}

pub fn order_lists(diagnosis: &[IcdCode], procedure: &[IcdCode], strategy: OrderingStrategy) -> Vec<IcdCode> {
    match strategy {
        OrderingStrategy::DiagThenProc => diagnosis.iter().chain(procedure).cloned().collect(),
        OrderingStrategy::ProcThenDiag => procedure.iter().chain(diagnosis).cloned().collect(),
        OrderingStrategy::InterleavedByPriority => {
            let mut out = Vec::with_capacity(diagnosis.len() + procedure.len());
            for i in 0..diagnosis.len().max(procedure.len()) {
                out.extend(diagnosis.get(i).cloned());
                out.extend(procedure.get(i).cloned());
            }
            out
        }
    }
}

pub fn build_target_sequence(doc: &CodedDocument, strategy: OrderingStrategy) -> Vec<IcdCode> {
    let d: Vec<IcdCode> = doc.codes(CodeKind::Diagnosis).cloned().collect();
    let p: Vec<IcdCode> = doc.codes(CodeKind::Procedure).cloned().collect();
    order_lists(&d, &p, strategy)
}

pub fn serialize_sequence(codes: &[IcdCode]) -> String {
    codes
        .iter()
        .map(IcdCode::display)
        .collect::<Vec<_>>()
        .join(&SEPARATOR.to_string())
}

/// Splits on `;` and resolves each item against the vocabulary. Items that
/// are not vocabulary codes are returned separately; both lists keep input
/// order and duplicates.
pub fn parse_sequence(text: &str, vocab: &CodeVocabulary) -> (Vec<IcdCode>, Vec<String>) {
    let mut codes = Vec::new();
    let mut rejected = Vec::new();
    if text.trim().is_empty() {
        return (codes, rejected);
    }
    for item in text.split(SEPARATOR).map(str::trim) {
        match vocab.lookup(item) {
            Some(c) => codes.push(c),
            None => rejected.push(item.to_string()),
        }
    }
    (codes, rejected)
}
