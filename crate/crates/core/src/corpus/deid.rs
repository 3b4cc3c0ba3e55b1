//! Replacement of `[** ... **]` de-identification surrogates by entity tags.

use std::borrow::Cow;
use std::path::Path;
use std::sync::OnceLock;

use regex::{Regex, RegexBuilder};
use serde::Deserialize;

use super::CorpusError;

/// Entity tags that replace surrogates. Each is a single atomic token.
pub const DAY: &str = "[DAY]";
pub const LOC: &str = "[LOC]";
pub const NAME: &str = "[NAME]";
pub const ID: &str = "[ID]";
pub const UNK: &str = "[UNK]";

pub const ENTITY_TAGS: [&str; 5] = [DAY, LOC, NAME, ID, UNK];

fn surrogate_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)\[\*\*(.*?)\*\*\]").unwrap())
}

#[derive(Debug, Deserialize)]
struct RuleSpec {
    pattern: String,
    tag: String,
}

/// Ordered (pattern, tag) table; the first pattern matching the surrogate
/// body wins, and bodies matching nothing become `[UNK]`.
#[derive(Clone, Debug)]
pub struct SurrogateRules {
    rules: Vec<(Regex, String)>,
}

impl Default for SurrogateRules {
    fn default() -> Self {
        let table = [
            (r"\d{2,4}-\d{1,2}-\d{1,2}", DAY),
            (r"hospital|location", LOC),
            (r"name|\b(dr|mr|mrs|ms|miss)\b", NAME),
            (r"^\s*\d+\s*$", ID),
        ];
        let rules = table
            .iter()
            .map(|(p, t)| (compile(p).unwrap(), t.to_string()))
            .collect();
        SurrogateRules { rules }
    }
}

fn compile(pattern: &str) -> Result<Regex, regex::Error> {
    RegexBuilder::new(pattern).case_insensitive(true).build()
}

impl SurrogateRules {
    /// Parses a JSON list of `{"pattern": ..., "tag": ...}` objects. Tags
    /// must be one of the reserved entity tags.
    pub fn from_json(json: &str) -> Result<Self, CorpusError> {
        let specs: Vec<RuleSpec> =
            serde_json::from_str(json).map_err(|e| CorpusError::Config(e.to_string()))?;
        let mut rules = Vec::with_capacity(specs.len());
        for s in specs {
            if !ENTITY_TAGS.contains(&s.tag.as_str()) {
                return Err(CorpusError::Config(format!("unknown entity tag {}", s.tag)));
            }
            let re = compile(&s.pattern).map_err(|e| CorpusError::Config(e.to_string()))?;
            rules.push((re, s.tag));
        }
        Ok(SurrogateRules { rules })
    }

    pub fn from_path(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn classify(&self, body: &str) -> &str {
        self.rules
            .iter()
            .find(|(re, _)| re.is_match(body))
            .map(|(_, t)| t.as_str())
            .unwrap_or(UNK)
    }

    /// Replaces every surrogate in `text`. Unterminated `[**` openers are
    /// left as they are.
    pub fn replace<'a>(&self, text: &'a str) -> Cow<'a, str> {
        surrogate_re().replace_all(text, |caps: &regex::Captures| {
            self.classify(&caps[1]).to_string()
        })
    }
}

/// Replacement with the default rule table.
pub fn replace_deid_surrogates(text: &str) -> String {
    static RULES: OnceLock<SurrogateRules> = OnceLock::new();
    RULES.get_or_init(SurrogateRules::default).replace(text).into_owned()
}
