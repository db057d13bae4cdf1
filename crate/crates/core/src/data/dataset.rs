use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dialog::{flatten_dialog, iob_encode, Speaker, Turn};
use super::preprocess::Preprocessor;
use super::vocab::{Vocab, PAD};
use crate::error::{Error, Result};

/// Sequence caps: words per text and characters per word.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Limits {
    pub max_len: usize,
    pub max_word_len: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self { max_len: 40, max_word_len: 20 }
    }
}

/// Layout of a JSONL input file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Classification,
    Labeling,
    Generation,
    Dialog,
}

impl FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(Self::Classification),
            "labeling" => Ok(Self::Labeling),
            "generation" => Ok(Self::Generation),
            "dialog" => Ok(Self::Dialog),
            _ => Err(Error::invalid(format!(
                "unknown dataset kind `{s}` (expected classification, labeling, generation or dialog)"
            ))),
        }
    }
}

/// What a model is trained to produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Labeling,
    Generation,
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(Self::Classification),
            "labeling" => Ok(Self::Labeling),
            "generation" => Ok(Self::Generation),
            _ => Err(Error::invalid(format!(
                "unknown task `{s}` (expected classification, labeling or generation)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRecord {
    #[serde(default)]
    pub id: Option<String>,
    pub text: String,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelingRecord {
    #[serde(default)]
    pub id: Option<String>,
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    #[serde(default)]
    pub id: Option<String>,
    pub source: String,
    pub target: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogRecord {
    #[serde(default)]
    pub id: Option<String>,
    pub turns: Vec<Turn>,
    #[serde(default)]
    pub slots: BTreeMap<String, String>,
    #[serde(default)]
    pub intent: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RawRecord {
    Classification(ClassificationRecord),
    Labeling(LabelingRecord),
    Generation(GenerationRecord),
    Dialog(DialogRecord),
}

impl RawRecord {
    pub fn id(&self) -> Option<&str> {
        match self {
            Self::Classification(r) => r.id.as_deref(),
            Self::Labeling(r) => r.id.as_deref(),
            Self::Generation(r) => r.id.as_deref(),
            Self::Dialog(r) => r.id.as_deref(),
        }
    }
}

/// Parses one record per non-blank line. Records without an `id` get their
/// 1-based line number.
pub fn load_dataset(path: &Path, kind: DatasetKind) -> Result<Vec<RawRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(path, &text, kind)
}

pub fn parse_dataset(path: &Path, text: &str, kind: DatasetKind) -> Result<Vec<RawRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse { path: path.to_path_buf(), line: line_no, msg };
        let default_id = Some(line_no.to_string());
        let rec = match kind {
            DatasetKind::Classification => {
                let mut r: ClassificationRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
                r.id = r.id.or(default_id);
                RawRecord::Classification(r)
            }
            DatasetKind::Labeling => {
                let mut r: LabelingRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
                if r.tokens.len() != r.tags.len() {
                    return Err(bad(format!("{} tokens but {} tags", r.tokens.len(), r.tags.len())));
                }
                r.id = r.id.or(default_id);
                RawRecord::Labeling(r)
            }
            DatasetKind::Generation => {
                let mut r: GenerationRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
                r.id = r.id.or(default_id);
                RawRecord::Generation(r)
            }
            DatasetKind::Dialog => {
                let mut r: DialogRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
                r.id = r.id.or(default_id);
                RawRecord::Dialog(r)
            }
        };
        out.push(rec);
    }
    Ok(out)
}

/// Seeded shuffle, then the first `round(ratio * n)` items form the first
/// part.
pub fn split<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!("split ratio {ratio} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (ratio * items.len() as f64).round() as usize;
    let pick = |ix: &[usize]| ix.iter().map(|&i| items[i].clone()).collect();
    Ok((pick(&order[..cut]), pick(&order[cut..])))
}

/// Supervision attached to a tokenized text before ID lookup.
#[derive(Clone, Debug, PartialEq)]
pub enum PreparedTarget {
    None,
    Label(String),
    Tags(Vec<String>),
    Tokens(Vec<String>),
}

/// A preprocessed, truncated example still in string form.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub id: String,
    pub tokens: Vec<String>,
    pub target: PreparedTarget,
}

fn wrap(mut body: Vec<String>, max_len: usize) -> Vec<String> {
    body.truncate(max_len.saturating_sub(2));
    let mut out = Vec::with_capacity(body.len() + 2);
    out.push("[CLS]".to_string());
    out.extend(body);
    out.push("[EOS]".to_string());
    out
}

/// Turns a raw record into the examples it yields for `task`.
///
/// Dialog records expand: one pair per bot turn for generation, one tagged
/// utterance per user turn for labeling, and the joined user turns for
/// intent classification. Generation sources and targets are wrapped in
/// `[CLS] … [EOS]`.
pub fn prepare(record: &RawRecord, task: TaskKind, prep: &Preprocessor, limits: Limits) -> Result<Vec<Prepared>> {
    let id = record.id().unwrap_or("").to_string();
    let mismatch = || Error::invalid(format!("record `{id}` cannot be used for a {task:?} task"));
    let one = |tokens: Vec<String>, target| vec![Prepared { id: id.clone(), tokens, target }];
    Ok(match (task, record) {
        (TaskKind::Classification, RawRecord::Classification(r)) => {
            one(prep.tokenize(&r.text), PreparedTarget::Label(r.label.clone()))
        }
        (TaskKind::Labeling, RawRecord::Labeling(r)) => {
            let (mut tokens, mut tags) = (Vec::new(), Vec::new());
            for (tok, tag) in r.tokens.iter().zip(&r.tags) {
                // Tokens that normalize to nothing are dropped with their tag.
                if let Some(t) = prep.tokenize(tok).into_iter().next() {
                    tokens.push(t);
                    tags.push(tag.clone());
                }
            }
            one(tokens, PreparedTarget::Tags(tags))
        }
        (TaskKind::Generation, RawRecord::Generation(r)) => one(
            wrap(prep.tokenize(&r.source), limits.max_len),
            PreparedTarget::Tokens(wrap(prep.tokenize(&r.target), limits.max_len)),
        ),
        (TaskKind::Generation, RawRecord::Dialog(r)) => {
            let n_bot = r.turns.iter().filter(|t| t.speaker == Speaker::Bot).count();
            let mut out = Vec::with_capacity(n_bot);
            for j in 1..=n_bot {
                let (input, target) = flatten_dialog(&r.turns, j, prep, limits.max_len)?;
                out.push(Prepared { id: format!("{id}#{j}"), tokens: input, target: PreparedTarget::Tokens(target) });
            }
            out
        }
        (TaskKind::Labeling, RawRecord::Dialog(r)) => r
            .turns
            .iter()
            .enumerate()
            .filter(|(_, t)| t.speaker == Speaker::User)
            .map(|(i, t)| {
                let tokens = prep.tokenize(&t.text);
                let tags = iob_encode(&tokens, &r.slots, prep);
                Prepared { id: format!("{id}#{}", i + 1), tokens, target: PreparedTarget::Tags(tags) }
            })
            .collect(),
        (TaskKind::Classification, RawRecord::Dialog(r)) => {
            let intent = r.intent.clone().ok_or_else(mismatch)?;
            let text: Vec<&str> =
                r.turns.iter().filter(|t| t.speaker == Speaker::User).map(|t| t.text.as_str()).collect();
            one(prep.tokenize(&text.join(" ")), PreparedTarget::Label(intent))
        }
        _ => return Err(mismatch()),
    })
}

pub fn prepare_all(records: &[RawRecord], task: TaskKind, prep: &Preprocessor, limits: Limits) -> Result<Vec<Prepared>> {
    let mut out = Vec::new();
    for r in records {
        out.extend(prepare(r, task, prep, limits)?);
    }
    Ok(out)
}

/// Dense, sorted label inventory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    pub fn new<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut names: Vec<String> = names.into_iter().map(Into::into).collect();
        names.sort();
        names.dedup();
        Self { names }
    }

    /// Labels (or tags, with `O` always present) found in `examples`.
    pub fn from_prepared(examples: &[Prepared]) -> Self {
        let mut names = Vec::new();
        for ex in examples {
            match &ex.target {
                PreparedTarget::Label(l) => names.push(l.clone()),
                PreparedTarget::Tags(t) => {
                    names.push("O".to_string());
                    names.extend(t.iter().cloned());
                }
                _ => {}
            }
        }
        Self::new(names)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Target {
    None,
    Class(usize),
    /// One tag per unpadded position.
    Tags(Vec<usize>),
    /// Target word IDs including the `[CLS]`/`[EOS]` wrap.
    Tokens(Vec<usize>),
}

/// Fixed-size ID form of one example: `max_len` word slots, each with
/// `max_word_len` char slots, padded with `[PAD]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample {
    pub id: String,
    pub tokens: Vec<String>,
    pub word_ids: Vec<usize>,
    pub char_ids: Vec<Vec<usize>>,
    pub mask: Vec<bool>,
    pub target: Target,
}

impl EncodedExample {
    /// Number of real (unpadded) positions.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn words(&self) -> &[usize] {
        &self.word_ids[..self.len()]
    }

    /// Unpadded char IDs of position `i`.
    pub fn chars(&self, i: usize) -> &[usize] {
        let row = &self.char_ids[i];
        let n = row.iter().position(|&c| c == PAD).unwrap_or(row.len());
        &row[..n]
    }

    pub fn decode(&self, vocab: &Vocab) -> Vec<String> {
        self.words().iter().map(|&w| vocab.word(w).to_string()).collect()
    }
}

/// Looks up IDs for `tokens`. Returns `None` for an empty token list.
pub fn encode_tokens(id: &str, tokens: &[String], vocab: &Vocab, limits: Limits) -> Option<EncodedExample> {
    let n = tokens.len().min(limits.max_len);
    if n == 0 {
        return None;
    }
    let tokens = tokens[..n].to_vec();
    let mut word_ids = vec![PAD; limits.max_len];
    let mut char_ids = vec![vec![PAD; limits.max_word_len]; limits.max_len];
    let mut mask = vec![false; limits.max_len];
    for (i, tok) in tokens.iter().enumerate() {
        word_ids[i] = vocab.word_id(tok);
        for (slot, c) in char_ids[i].iter_mut().zip(vocab.char_ids(tok, limits.max_word_len)) {
            *slot = c;
        }
        mask[i] = true;
    }
    Some(EncodedExample { id: id.to_string(), tokens, word_ids, char_ids, mask, target: Target::None })
}

/// Encodes one prepared example. `Ok(None)` means nothing survived
/// preprocessing.
pub fn encode_example(ex: &Prepared, vocab: &Vocab, labels: &LabelSet, limits: Limits) -> Result<Option<EncodedExample>> {
    let Some(mut enc) = encode_tokens(&ex.id, &ex.tokens, vocab, limits) else {
        return Ok(None);
    };
    let lookup = |name: &str| {
        labels
            .index(name)
            .ok_or_else(|| Error::invalid(format!("example `{}`: unknown label `{name}`", ex.id)))
    };
    enc.target = match &ex.target {
        PreparedTarget::None => Target::None,
        PreparedTarget::Label(l) => Target::Class(lookup(l)?),
        PreparedTarget::Tags(tags) => {
            if tags.len() != ex.tokens.len() {
                return Err(Error::invalid(format!(
                    "example `{}`: {} tokens but {} tags",
                    ex.id,
                    ex.tokens.len(),
                    tags.len()
                )));
            }
            Target::Tags(tags[..enc.len()].iter().map(|t| lookup(t)).collect::<Result<_>>()?)
        }
        PreparedTarget::Tokens(t) => {
            Target::Tokens(t.iter().take(limits.max_len).map(|w| vocab.word_id(w)).collect())
        }
    };
    Ok(Some(enc))
}

/// Encodes every example, skipping (and counting) the empty ones.
pub fn encode_all(
    examples: &[Prepared],
    vocab: &Vocab,
    labels: &LabelSet,
    limits: Limits,
) -> Result<(Vec<EncodedExample>, usize)> {
    let mut out = Vec::with_capacity(examples.len());
    let mut skipped = 0;
    for ex in examples {
        match encode_example(ex, vocab, labels, limits)? {
            Some(e) => out.push(e),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} example(s) that were empty after preprocessing");
    }
    Ok((out, skipped))
}

/// Token lists a vocabulary should be built from: inputs plus generation
/// targets.
pub fn vocab_corpus(examples: &[Prepared]) -> Vec<Vec<String>> {
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        out.push(ex.tokens.clone());
        if let PreparedTarget::Tokens(t) = &ex.target {
            out.push(t.clone());
        }
    }
    out
}
