//! ICD-9-CM diagnosis and procedure codes.
//!
//! Codes are stored undotted (the form used by the source tables) and
//! rendered dotted for display and serialization. Validation is structural:
//!
//! | kind      | canonical grammar                                           |
//! |-----------|-------------------------------------------------------------|
//! | diagnosis | `[0-9]{3}[0-9]{0,2}`, `V[0-9]{2}[0-9]{0,2}`, `E[0-9]{3}[0-9]?` |
//! | procedure | `[0-9]{2}[0-9]{0,2}`                                        |
//!
//! The dot goes after the third character (fourth for E-codes) of a
//! diagnosis and after the second character of a procedure, and only when
//! digits follow it.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("`{raw}` is not a valid ICD-9 {kind} code")]
pub struct FormatError {
    pub raw: String,
    pub kind: CodeKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeKind {
    Diagnosis,
    Procedure,
}

impl CodeKind {
    pub const ALL: [CodeKind; 2] = [CodeKind::Diagnosis, CodeKind::Procedure];

    pub fn tag(self) -> char {
        match self {
            CodeKind::Diagnosis => 'D',
            CodeKind::Procedure => 'P',
        }
    }
}

impl fmt::Display for CodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CodeKind::Diagnosis => "diagnosis",
            CodeKind::Procedure => "procedure",
        })
    }
}

/// A validated ICD-9 code. Equality and ordering are by (kind, canonical).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IcdCode {
    kind: CodeKind,
    canonical: String,
}

fn all_digits(s: &str) -> bool {
    s.bytes().all(|b| b.is_ascii_digit())
}

/// Length of the prefix that precedes the dot in display form.
fn head_len(kind: CodeKind, canonical: &str) -> usize {
    match kind {
        CodeKind::Procedure => 2,
        CodeKind::Diagnosis if canonical.starts_with('E') => 4,
        CodeKind::Diagnosis => 3,
    }
}

fn valid_canonical(kind: CodeKind, s: &str) -> bool {
    let len = s.len();
    match kind {
        CodeKind::Procedure => (2..=4).contains(&len) && all_digits(s),
        CodeKind::Diagnosis => match s.as_bytes().first() {
            Some(b'V') => (3..=5).contains(&len) && all_digits(&s[1..]),
            Some(b'E') => (4..=5).contains(&len) && all_digits(&s[1..]),
            Some(_) => (3..=5).contains(&len) && all_digits(s),
            None => false,
        },
    }
}

impl IcdCode {
    /// Parses a dotted or undotted code of the given kind. Surrounding
    /// whitespace is ignored and a leading `v`/`e` is upper-cased. A dot, if
    /// present, must sit where the display form puts it.
    pub fn parse(raw: &str, kind: CodeKind) -> Result<IcdCode, FormatError> {
        let err = || FormatError {
            raw: raw.to_string(),
            kind,
        };
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            return Err(err());
        }
        let upper = trimmed.to_ascii_uppercase();
        let canonical = match upper.split_once('.') {
            None => upper.clone(),
            Some((head, tail)) => {
                if tail.is_empty() || tail.contains('.') {
                    return Err(err());
                }
                let joined = format!("{head}{tail}");
                if head.len() != head_len(kind, &joined) {
                    return Err(err());
                }
                joined
            }
        };
        if !valid_canonical(kind, &canonical) {
            return Err(err());
        }
        Ok(IcdCode { kind, canonical })
    }

    pub fn diagnosis(raw: &str) -> Result<IcdCode, FormatError> {
        Self::parse(raw, CodeKind::Diagnosis)
    }

    pub fn procedure(raw: &str) -> Result<IcdCode, FormatError> {
        Self::parse(raw, CodeKind::Procedure)
    }

    pub fn kind(&self) -> CodeKind {
        self.kind
    }

    pub fn canonical(&self) -> &str {
        &self.canonical
    }

    /// Dotted form, e.g. `401.9`, `00.42`, `E888.9`.
    pub fn display(&self) -> String {
        let h = head_len(self.kind, &self.canonical);
        if self.canonical.len() > h {
            format!("{}.{}", &self.canonical[..h], &self.canonical[h..])
        } else {
            self.canonical.clone()
        }
    }

    /// Kind-tagged display form (`D:401.9`), unambiguous across kinds.
    pub fn tagged(&self) -> String {
        format!("{}:{}", self.kind.tag(), self.display())
    }

    pub fn parse_tagged(s: &str) -> Result<IcdCode, FormatError> {
        match s.split_once(':') {
            Some(("D", rest)) => Self::diagnosis(rest),
            Some(("P", rest)) => Self::procedure(rest),
            _ => Err(FormatError {
                raw: s.to_string(),
                kind: CodeKind::Diagnosis,
            }),
        }
    }
}

impl fmt::Display for IcdCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.display())
    }
}

/// Dense label index over a fixed code set: ids `0..L`, ordered by kind
/// (diagnoses first) and then canonical string.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeVocabulary {
    codes: Vec<IcdCode>,
    index: HashMap<IcdCode, usize>,
}

impl CodeVocabulary {
    /// Builds the vocabulary from any collection of codes; duplicates collapse.
    pub fn from_codes(codes: impl IntoIterator<Item = IcdCode>) -> Self {
        let mut codes: Vec<IcdCode> = codes.into_iter().collect();
        codes.sort();
        codes.dedup();
        let index = codes.iter().cloned().enumerate().map(|(i, c)| (c, i)).collect();
        CodeVocabulary { codes, index }
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn id(&self, code: &IcdCode) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn code(&self, id: usize) -> Option<&IcdCode> {
        self.codes.get(id)
    }

    pub fn codes(&self) -> &[IcdCode] {
        &self.codes
    }

    pub fn contains(&self, code: &IcdCode) -> bool {
        self.index.contains_key(code)
    }

    /// Resolves a display string against the vocabulary, trying the
    /// diagnosis reading first and then the procedure reading.
    pub fn lookup(&self, raw: &str) -> Option<IcdCode> {
        CodeKind::ALL
            .iter()
            .filter_map(|&k| IcdCode::parse(raw, k).ok())
            .find(|c| self.contains(c))
    }
}
