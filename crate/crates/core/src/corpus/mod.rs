//! Coded clinical documents, JSONL corpora, and text preprocessing.

pub mod deid;
pub mod synth;
pub mod tokenize;

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::icd::{CodeKind, CodeVocabulary, IcdCode};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {detail}")]
    Schema { line: usize, detail: String },
    #[error("document {id}: {kind} seq_num values are not strictly increasing")]
    Order { id: String, kind: CodeKind },
    #[error("document {id}: duplicate {kind} code {code}")]
    DuplicateCode {
        id: String,
        kind: CodeKind,
        code: String,
    },
    #[error("document id {0} appears more than once")]
    DuplicateId(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// A clinical note with its diagnosis and procedure codes, each list in
/// priority order (ascending `seq_num`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodedDocument {
    pub id: String,
    pub text: String,
    pub diagnosis: Vec<(IcdCode, u32)>,
    pub procedure: Vec<(IcdCode, u32)>,
}

impl CodedDocument {
    /// Builds a document from priority-ordered code lists, numbering
    /// `seq_num` from 1.
    pub fn new(id: impl Into<String>, text: impl Into<String>, diagnosis: Vec<IcdCode>, procedure: Vec<IcdCode>) -> Self {
        let number = |v: Vec<IcdCode>| v.into_iter().zip(1..).collect();
        CodedDocument {
            id: id.into(),
            text: text.into(),
            diagnosis: number(diagnosis),
            procedure: number(procedure),
        }
    }

    pub fn codes(&self, kind: CodeKind) -> impl Iterator<Item = &IcdCode> {
        let list = match kind {
            CodeKind::Diagnosis => &self.diagnosis,
            CodeKind::Procedure => &self.procedure,
        };
        list.iter().map(|(c, _)| c)
    }

    pub fn all_codes(&self) -> impl Iterator<Item = &IcdCode> {
        self.codes(CodeKind::Diagnosis).chain(self.codes(CodeKind::Procedure))
    }

    fn check(&self) -> Result<(), CorpusError> {
        for kind in CodeKind::ALL {
            let list = match kind {
                CodeKind::Diagnosis => &self.diagnosis,
                CodeKind::Procedure => &self.procedure,
            };
            if list.windows(2).any(|w| w[1].1 <= w[0].1) {
                return Err(CorpusError::Order {
                    id: self.id.clone(),
                    kind,
                });
            }
            let mut seen = HashSet::new();
            for (c, _) in list {
                if !seen.insert(c) {
                    return Err(CorpusError::DuplicateCode {
                        id: self.id.clone(),
                        kind,
                        code: c.display(),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct DocumentRecord {
    id: String,
    text: String,
    diagnosis: Vec<(String, u32)>,
    procedure: Vec<(String, u32)>,
}

fn parse_line(line: &str, lineno: usize) -> Result<CodedDocument, CorpusError> {
    let schema = |detail: String| CorpusError::Schema {
        line: lineno,
        detail,
    };
    let value: Value = serde_json::from_str(line).map_err(|e| schema(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| schema("expected a JSON object".into()))?;
    for field in ["id", "text", "diagnosis", "procedure"] {
        if !obj.contains_key(field) {
            return Err(schema(format!("missing field `{field}`")));
        }
    }
    let rec: DocumentRecord = serde_json::from_value(value).map_err(|e| schema(e.to_string()))?;
    let convert = |list: Vec<(String, u32)>, kind| -> Result<Vec<(IcdCode, u32)>, CorpusError> {
        list.into_iter()
            .map(|(raw, seq)| {
                IcdCode::parse(&raw, kind)
                    .map(|c| (c, seq))
                    .map_err(|e| schema(e.to_string()))
            })
            .collect()
    };
    let doc = CodedDocument {
        diagnosis: convert(rec.diagnosis, CodeKind::Diagnosis)?,
        procedure: convert(rec.procedure, CodeKind::Procedure)?,
        id: rec.id,
        text: rec.text,
    };
    doc.check()?;
    Ok(doc)
}

/// Reads one document per non-blank line.
pub fn read_jsonl(path: &Path) -> Result<Vec<CodedDocument>, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        docs.push(parse_line(&line, i + 1)?);
    }
    Ok(docs)
}

pub fn document_to_json(doc: &CodedDocument) -> String {
    let list = |v: &[(IcdCode, u32)]| v.iter().map(|(c, s)| (c.canonical().to_string(), *s)).collect();
    let rec = DocumentRecord {
        id: doc.id.clone(),
        text: doc.text.clone(),
        diagnosis: list(&doc.diagnosis),
        procedure: list(&doc.procedure),
    };
    serde_json::to_string(&rec).expect("document serializes")
}

pub fn write_jsonl(path: &Path, docs: &[CodedDocument]) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in docs {
        writeln!(w, "{}", document_to_json(d)).map_err(|e| CorpusError::io(path, e))?;
    }
    w.flush().map_err(|e| CorpusError::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Validation => "validation.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" | "dev" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}`")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorpusSplits {
    pub train: Vec<CodedDocument>,
    pub validation: Vec<CodedDocument>,
    pub test: Vec<CodedDocument>,
}

impl CorpusSplits {
    pub fn get(&self, split: Split) -> &[CodedDocument] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &CodedDocument> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }

    /// Label index over every code in every split, so that codes seen only
    /// at evaluation time still have an id.
    pub fn code_vocabulary(&self) -> CodeVocabulary {
        CodeVocabulary::from_codes(self.all().flat_map(|d| d.all_codes().cloned()))
    }

    fn check_disjoint(&self) -> Result<(), CorpusError> {
        let mut ids = HashSet::new();
        for d in self.all() {
            if !ids.insert(d.id.as_str()) {
                return Err(CorpusError::DuplicateId(d.id.clone()));
            }
        }
        Ok(())
    }

    /// Loads `train.jsonl`, `validation.jsonl` and `test.jsonl` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, CorpusError> {
        let splits = CorpusSplits {
            train: read_jsonl(&dir.join(Split::Train.file_name()))?,
            validation: read_jsonl(&dir.join(Split::Validation.file_name()))?,
            test: read_jsonl(&dir.join(Split::Test.file_name()))?,
        };
        splits.check_disjoint()?;
        Ok(splits)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), CorpusError> {
        std::fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
        for s in Split::ALL {
            write_jsonl(&dir.join(s.file_name()), self.get(s))?;
        }
        Ok(())
    }

    pub fn stats(&self) -> CorpusStats {
        CorpusStats::of(self.all())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CountStats {
    pub mean: f64,
    pub sd: f64,
    pub min: usize,
    pub max: usize,
}

impl CountStats {
    fn of(counts: &[usize]) -> Self {
        if counts.is_empty() {
            return CountStats::default();
        }
        let n = counts.len() as f64;
        let mean = counts.iter().sum::<usize>() as f64 / n;
        let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n;
        CountStats {
            mean,
            sd: var.sqrt(),
            min: *counts.iter().min().unwrap(),
            max: *counts.iter().max().unwrap(),
        }
    }
}

/// Per-document code-count statistics.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CorpusStats {
    pub documents: usize,
    pub diagnosis: CountStats,
    pub procedure: CountStats,
}

impl CorpusStats {
    pub fn of<'a>(docs: impl IntoIterator<Item = &'a CodedDocument>) -> Self {
        let (mut d, mut p) = (Vec::new(), Vec::new());
        for doc in docs {
            d.push(doc.diagnosis.len());
            p.push(doc.procedure.len());
        }
        CorpusStats {
            documents: d.len(),
            diagnosis: CountStats::of(&d),
            procedure: CountStats::of(&p),
        }
    }
}
