//! Word-level tokenizer and token vocabulary.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::deid::ENTITY_TAGS;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
const PAD: &str = "[PAD]";
const EOS: &str = "[EOS]";

fn token_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[(day|loc|name|id|unk)\]|[a-z0-9]+").unwrap())
}

/// Splits lowercased text into words and atomic entity tags. Punctuation
/// and whitespace separate tokens and are dropped.
pub fn words(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    token_re()
        .find_iter(&lower)
        .map(|m| {
            let s = m.as_str();
            if s.starts_with('[') {
                s.to_uppercase()
            } else {
                s.to_string()
            }
        })
        .collect()
}

/// Token string to id map. Ids 0..7 are reserved: `[PAD]`, `[UNK]`,
/// `[EOS]`, then the entity tags `[DAY]`, `[LOC]`, `[NAME]`, `[ID]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct TokenVocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for TokenVocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        TokenVocabulary { tokens, index }
    }
}

impl From<TokenVocabulary> for Vec<String> {
    fn from(v: TokenVocabulary) -> Self {
        v.tokens
    }
}

impl TokenVocabulary {
    fn reserved() -> Vec<String> {
        let mut v = vec![PAD.to_string(), ENTITY_TAGS[4].to_string(), EOS.to_string()];
        v.extend(ENTITY_TAGS[..4].iter().map(|t| t.to_string()));
        v
    }

    /// Builds a vocabulary from texts, keeping words seen at least
    /// `min_count` times. Word ids follow descending frequency, then the
    /// word itself, so the result does not depend on text order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in words(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut tokens = Self::reserved();
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && !tokens.contains(w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        tokens.extend(ranked.into_iter().map(|(w, _)| w));
        tokens.into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        words(text).iter().map(|w| self.id(w)).collect()
    }
}

/// Fixed-length token ids plus a mask marking real tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Padded {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

/// Truncates to the first `target_len` tokens or appends `[PAD]`.
pub fn pad_or_truncate(tokens: &[u32], target_len: usize) -> Padded {
    let real = tokens.len().min(target_len);
    let mut ids = tokens[..real].to_vec();
    ids.resize(target_len, PAD_ID);
    let mut mask = vec![true; real];
    mask.resize(target_len, false);
    Padded { ids, mask }
}
