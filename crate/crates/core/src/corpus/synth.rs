//! Deterministic synthetic corpora with learnable code sets and orderings.
//!
//! Every code owns a disjoint set of pseudo-word "signature" tokens. A
//! document mentions each of its codes one or more times; within a kind,
//! higher-priority codes are mentioned first and at least as often as
//! lower-priority ones. [`oracle_decode`] recovers the gold lists from the
//! text alone by counting signature tokens.

use std::collections::{BTreeSet, HashMap};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use super::deid::ENTITY_TAGS;
use super::tokenize::words;
use super::{CodedDocument, CorpusError, CorpusSplits};
use crate::icd::{CodeKind, IcdCode};

/// Distribution of per-document code counts: `min` plus a negative
/// binomial matched to `mean` and `sd`, redrawn while above `max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountDistribution {
    pub mean: f64,
    pub sd: f64,
    pub min: usize,
    pub max: usize,
}

impl CountDistribution {
    fn validate(&self, what: &str, available: usize) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::Config(format!("{what}: {m}")));
        if self.min > self.max {
            return bad(format!("min {} exceeds max {}", self.min, self.max));
        }
        if self.max > available {
            return bad(format!("max {} exceeds the {available} available codes", self.max));
        }
        if !(self.mean >= self.min as f64 && self.mean <= self.max as f64) || !(self.sd >= 0.0) {
            return bad("mean must lie in [min, max] and sd must be non-negative".into());
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let mu = self.mean - self.min as f64;
        if mu <= 0.0 {
            return self.min;
        }
        let var = self.sd * self.sd;
        loop {
            let lambda = if var > mu {
                let shape = mu * mu / (var - mu);
                Gamma::new(shape, mu / shape).unwrap().sample(rng)
            } else {
                mu
            };
            let extra = if lambda > 0.0 {
                Poisson::new(lambda).unwrap().sample(rng) as usize
            } else {
                0
            };
            let n = self.min + extra;
            if n <= self.max {
                return n;
            }
        }
    }
}

/// Order in which codes are first mentioned in the text.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MentionOrder {
    /// d1, p1, d2, p2, ...
    #[default]
    Interleaved,
    DiagnosisFirst,
    ProcedureFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub diagnosis_codes: usize,
    pub procedure_codes: usize,
    pub train_docs: usize,
    pub validation_docs: usize,
    pub test_docs: usize,
    pub diagnosis_count: CountDistribution,
    pub procedure_count: CountDistribution,
    /// Exponent of the Zipf popularity law used when drawing codes.
    pub zipf_exponent: f64,
    pub signature_size: usize,
    /// Mentions of the rank-1 code of each kind.
    pub mentions_top: usize,
    /// Mentions lost per rank step (never below one).
    pub mentions_step: usize,
    pub mention_order: MentionOrder,
    pub filler_vocab: usize,
    pub filler_per_doc: usize,
    pub surrogates_per_doc: usize,
}

impl Default for SynthConfig {
    /// Sized so per-document code counts follow the MIMIC-III discharge
    /// summary statistics (diagnosis mean 11, procedure mean 4).
    fn default() -> Self {
        SynthConfig {
            diagnosis_codes: 200,
            procedure_codes: 80,
            train_docs: 1000,
            validation_docs: 150,
            test_docs: 150,
            diagnosis_count: CountDistribution {
                mean: 11.0,
                sd: 6.46,
                min: 1,
                max: 39,
            },
            procedure_count: CountDistribution {
                mean: 4.0,
                sd: 3.88,
                min: 0,
                max: 40,
            },
            zipf_exponent: 1.0,
            signature_size: 2,
            mentions_top: 3,
            mentions_step: 1,
            mention_order: MentionOrder::Interleaved,
            filler_vocab: 400,
            filler_per_doc: 40,
            surrogates_per_doc: 2,
        }
    }
}

impl SynthConfig {
    /// Small corpus used for end-to-end learning checks: 50 codes, 300
    /// training documents, short texts.
    pub fn sanity() -> Self {
        SynthConfig {
            diagnosis_codes: 35,
            procedure_codes: 15,
            train_docs: 300,
            validation_docs: 60,
            test_docs: 60,
            diagnosis_count: CountDistribution {
                mean: 3.5,
                sd: 1.5,
                min: 1,
                max: 8,
            },
            procedure_count: CountDistribution {
                mean: 1.5,
                sd: 1.0,
                min: 0,
                max: 4,
            },
            zipf_exponent: 0.5,
            signature_size: 1,
            mentions_top: 4,
            mentions_step: 1,
            mention_order: MentionOrder::Interleaved,
            filler_vocab: 100,
            filler_per_doc: 12,
            surrogates_per_doc: 1,
        }
    }

    pub fn total_docs(&self) -> usize {
        self.train_docs + self.validation_docs + self.test_docs
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.total_docs() == 0 {
            return Err(CorpusError::Config("corpus must contain at least one document".into()));
        }
        if self.signature_size == 0 || self.mentions_top == 0 {
            return Err(CorpusError::Config("signature_size and mentions_top must be positive".into()));
        }
        if !(self.zipf_exponent >= 0.0) {
            return Err(CorpusError::Config("zipf_exponent must be non-negative".into()));
        }
        if self.filler_per_doc > 0 && self.filler_vocab == 0 {
            return Err(CorpusError::Config("filler words requested with an empty filler vocabulary".into()));
        }
        self.diagnosis_count.validate("diagnosis_count", self.diagnosis_codes)?;
        self.procedure_count.validate("procedure_count", self.procedure_codes)?;
        if self.diagnosis_codes > 1000 * 100 || self.procedure_codes > 100 * 100 {
            return Err(CorpusError::Config("code vocabulary larger than the grammar allows".into()));
        }
        Ok(())
    }

    /// Mentions of the code at 1-based per-kind rank `rank`.
    pub fn mentions(&self, rank: usize) -> usize {
        self.mentions_top
            .saturating_sub(self.mentions_step * (rank - 1))
            .max(1)
    }
}

/// Code inventory and the pseudo-words that signal each code.
#[derive(Clone, Debug)]
pub struct SignatureTable {
    pub diagnosis: Vec<IcdCode>,
    pub procedure: Vec<IcdCode>,
    signatures: HashMap<IcdCode, Vec<String>>,
    pub filler: Vec<String>,
}

impl SignatureTable {
    pub fn signature(&self, code: &IcdCode) -> &[String] {
        &self.signatures[code]
    }

    fn codes(&self, kind: CodeKind) -> &[IcdCode] {
        match kind {
            CodeKind::Diagnosis => &self.diagnosis,
            CodeKind::Procedure => &self.procedure,
        }
    }
}

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Distinct three-syllable pseudo-words (70^3 available).
fn pseudo_words(n: usize, rng: &mut impl Rng) -> Vec<String> {
    let syllables: Vec<String> = ONSETS
        .iter()
        .flat_map(|o| VOWELS.iter().map(move |v| format!("{o}{v}")))
        .collect();
    let s = syllables.len();
    assert!(n <= s * s * s, "too many pseudo-words requested");
    let mut idx: Vec<usize> = (0..s * s * s).collect();
    idx.shuffle(rng);
    idx.truncate(n);
    idx.iter()
        .map(|&i| format!("{}{}{}", syllables[i / (s * s)], syllables[(i / s) % s], syllables[i % s]))
        .collect()
}

fn random_codes(kind: CodeKind, n: usize, rng: &mut impl Rng) -> Vec<IcdCode> {
    let mut set = BTreeSet::new();
    while set.len() < n {
        let raw = match kind {
            CodeKind::Diagnosis => format!("{:03}{:02}", rng.random_range(0..1000), rng.random_range(0..100)),
            CodeKind::Procedure => format!("{:02}{:02}", rng.random_range(0..100), rng.random_range(0..100)),
        };
        set.insert(IcdCode::parse(&raw, kind).expect("generated code is well formed"));
    }
    let mut v: Vec<IcdCode> = set.into_iter().collect();
    v.shuffle(rng);
    v
}

/// Draws `k` distinct indices with probability proportional to `weights`,
/// returned in draw order.
fn weighted_without_replacement(weights: &[f64], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut w = weights.to_vec();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = w.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &wi) in w.iter().enumerate() {
            if wi <= 0.0 {
                continue;
            }
            pick = Some(i);
            if u < wi {
                break;
            }
            u -= wi;
        }
        let i = pick.expect("enough codes with positive weight");
        out.push(i);
        w[i] = 0.0;
    }
    out
}

fn surrogate(rng: &mut impl Rng) -> String {
    match rng.random_range(0..4) {
        0 => format!("[**{}-{}-{}**]", rng.random_range(2100..2200), rng.random_range(1..13), rng.random_range(1..29)),
        1 => format!("[**Hospital {}**]", rng.random_range(1..3000)),
        2 => format!("[**Known lastname {}**]", rng.random_range(1..3000)),
        _ => format!("[**{}**]", rng.random_range(1000..99999)),
    }
}

/// The code lists of a document, interleaved by per-kind rank according to
/// `order`, each tagged with its rank.
fn mention_schedule<'a>(diag: &'a [IcdCode], proc_: &'a [IcdCode], order: MentionOrder) -> Vec<(&'a IcdCode, usize)> {
    let d = diag.iter().zip(1..);
    let p = proc_.iter().zip(1..);
    match order {
        MentionOrder::DiagnosisFirst => d.chain(p).collect(),
        MentionOrder::ProcedureFirst => p.chain(d).collect(),
        MentionOrder::Interleaved => {
            let mut out = Vec::with_capacity(diag.len() + proc_.len());
            for i in 0..diag.len().max(proc_.len()) {
                if let Some(c) = diag.get(i) {
                    out.push((c, i + 1));
                }
                if let Some(c) = proc_.get(i) {
                    out.push((c, i + 1));
                }
            }
            out
        }
    }
}

pub struct Generator {
    cfg: SynthConfig,
    table: SignatureTable,
    rng: ChaCha8Rng,
    popularity: [Vec<f64>; 2],
}

impl Generator {
    pub fn new(cfg: SynthConfig, seed: u64) -> Result<Self, CorpusError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let diagnosis = random_codes(CodeKind::Diagnosis, cfg.diagnosis_codes, &mut rng);
        let procedure = random_codes(CodeKind::Procedure, cfg.procedure_codes, &mut rng);
        let n_sig = cfg.signature_size * (diagnosis.len() + procedure.len());
        let mut pool = pseudo_words(n_sig + cfg.filler_vocab, &mut rng);
        let filler = pool.split_off(n_sig);
        let mut chunks = pool.chunks(cfg.signature_size);
        let signatures = diagnosis
            .iter()
            .chain(&procedure)
            .map(|c| (c.clone(), chunks.next().unwrap().to_vec()))
            .collect();
        let zipf = |n: usize| (1..=n).map(|r| (r as f64).powf(-cfg.zipf_exponent)).collect();
        let popularity = [zipf(diagnosis.len()), zipf(procedure.len())];
        Ok(Generator {
            table: SignatureTable {
                diagnosis,
                procedure,
                signatures,
                filler,
            },
            cfg,
            rng,
            popularity,
        })
    }

    pub fn table(&self) -> &SignatureTable {
        &self.table
    }

    fn draw_codes(&mut self, kind: CodeKind) -> Vec<IcdCode> {
        let (dist, k) = match kind {
            CodeKind::Diagnosis => (&self.cfg.diagnosis_count, 0),
            CodeKind::Procedure => (&self.cfg.procedure_count, 1),
        };
        let n = dist.sample(&mut self.rng);
        weighted_without_replacement(&self.popularity[k], n, &mut self.rng)
            .into_iter()
            .map(|i| self.table.codes(kind)[i].clone())
            .collect()
    }

    pub fn document(&mut self, id: String) -> CodedDocument {
        let diag = self.draw_codes(CodeKind::Diagnosis);
        let proc_ = self.draw_codes(CodeKind::Procedure);
        let schedule = mention_schedule(&diag, &proc_, self.cfg.mention_order);
        let mut head: Vec<String> = Vec::new();
        let mut tail: Vec<String> = Vec::new();
        for &(code, rank) in &schedule {
            let sig = self.table.signature(code);
            head.extend(sig.iter().cloned());
            for _ in 1..self.cfg.mentions(rank) {
                tail.extend(sig.iter().cloned());
            }
        }
        for _ in 0..self.cfg.filler_per_doc {
            let w = self.table.filler.choose(&mut self.rng).unwrap().clone();
            tail.push(w);
        }
        for _ in 0..self.cfg.surrogates_per_doc {
            tail.push(surrogate(&mut self.rng));
        }
        tail.shuffle(&mut self.rng);
        head.extend(tail);
        CodedDocument::new(id, head.join(" "), diag, proc_)
    }

    /// Generates all documents and splits them into the configured sizes
    /// with label-stratified assignment.
    pub fn corpus(&mut self) -> CorpusSplits {
        let docs: Vec<CodedDocument> = (0..self.cfg.total_docs())
            .map(|i| self.document(format!("syn-{i:06}")))
            .collect();
        let sizes = [self.cfg.train_docs, self.cfg.validation_docs, self.cfg.test_docs];
        stratified_split(docs, sizes)
    }
}

pub fn generate_synthetic_corpus(cfg: &SynthConfig, seed: u64) -> Result<CorpusSplits, CorpusError> {
    Ok(Generator::new(cfg.clone(), seed)?.corpus())
}

/// Recovers the priority-ordered code lists of a synthetic document from
/// its text: codes are ranked by signature mention count, ties broken by
/// first mention. Tokens that match no signature are ignored.
pub fn oracle_decode(table: &SignatureTable, text: &str) -> (Vec<IcdCode>, Vec<IcdCode>) {
    let mut owner: HashMap<&str, &IcdCode> = HashMap::new();
    for c in table.diagnosis.iter().chain(&table.procedure) {
        for w in table.signature(c) {
            owner.insert(w.as_str(), c);
        }
    }
    let mut seen: HashMap<&IcdCode, (usize, usize)> = HashMap::new();
    let tokens = words(text);
    for (pos, w) in tokens.iter().enumerate() {
        if ENTITY_TAGS.contains(&w.as_str()) {
            continue;
        }
        if let Some(&c) = owner.get(w.as_str()) {
            seen.entry(c).or_insert((0, pos)).0 += 1;
        }
    }
    let rank = |kind: CodeKind| {
        let mut v: Vec<(&IcdCode, (usize, usize))> =
            seen.iter().filter(|(c, _)| c.kind() == kind).map(|(c, s)| (*c, *s)).collect();
        v.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
        v.into_iter().map(|(c, _)| c.clone()).collect()
    };
    (rank(CodeKind::Diagnosis), rank(CodeKind::Procedure))
}

/// Greedy iterative stratification: labels are visited rarest first, and
/// each document carrying the current label goes to the split that still
/// wants the most of that label (then the most documents overall, then
/// the lowest split index). Split sizes are met exactly.
pub fn stratified_split(docs: Vec<CodedDocument>, sizes: [usize; 3]) -> CorpusSplits {
    assert_eq!(docs.len(), sizes.iter().sum::<usize>(), "split sizes must cover all documents");
    let total = docs.len().max(1) as f64;
    let ratio: Vec<f64> = sizes.iter().map(|&s| s as f64 / total).collect();
    let labels: Vec<Vec<IcdCode>> = docs.iter().map(|d| d.all_codes().cloned().collect()).collect();
    let mut freq: HashMap<&IcdCode, usize> = HashMap::new();
    for ls in &labels {
        for l in ls {
            *freq.entry(l).or_default() += 1;
        }
    }
    let mut want: Vec<HashMap<&IcdCode, f64>> = ratio
        .iter()
        .map(|r| freq.iter().map(|(l, &n)| (*l, r * n as f64)).collect())
        .collect();
    let mut capacity = sizes;
    let mut assigned: Vec<Option<usize>> = vec![None; docs.len()];
    let mut remaining: HashMap<&IcdCode, usize> = freq.clone();
    let mut left = docs.len();

    let mut assign = |i: usize,
                      s: usize,
                      assigned: &mut Vec<Option<usize>>,
                      capacity: &mut [usize; 3],
                      want: &mut Vec<HashMap<&IcdCode, f64>>,
                      remaining: &mut HashMap<&IcdCode, usize>| {
        assigned[i] = Some(s);
        capacity[s] -= 1;
        for l in &labels[i] {
            *want[s].get_mut(l).unwrap() -= 1.0;
            *remaining.get_mut(l).unwrap() -= 1;
        }
        left -= 1;
    };

    loop {
        let label = remaining
            .iter()
            .filter(|(_, &n)| n > 0)
            .min_by(|a, b| a.1.cmp(b.1).then_with(|| a.0.cmp(b.0)))
            .map(|(l, _)| *l);
        let Some(label) = label else { break };
        let holders: Vec<usize> = (0..docs.len())
            .filter(|&i| assigned[i].is_none() && labels[i].contains(label))
            .collect();
        for i in holders {
            let s = (0..3)
                .filter(|&s| capacity[s] > 0)
                .max_by(|&a, &b| {
                    want[a][label]
                        .total_cmp(&want[b][label])
                        .then(capacity[a].cmp(&capacity[b]))
                        .then(b.cmp(&a))
                })
                .expect("capacity remains while documents remain");
            assign(i, s, &mut assigned, &mut capacity, &mut want, &mut remaining);
        }
    }
    for i in 0..docs.len() {
        if assigned[i].is_none() {
            let s = (0..3)
                .max_by(|&a, &b| capacity[a].cmp(&capacity[b]).then(b.cmp(&a)))
                .unwrap();
            assign(i, s, &mut assigned, &mut capacity, &mut want, &mut remaining);
        }
    }
    debug_assert_eq!(left, 0);
    let mut out = CorpusSplits::default();
    for (doc, s) in docs.into_iter().zip(assigned) {
        match s.unwrap() {
            0 => out.train.push(doc),
            1 => out.validation.push(doc),
            _ => out.test.push(doc),
        }
    }
    out
}
