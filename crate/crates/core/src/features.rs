//! tf-idf n-gram features.
//!
//! Two blocks share one index space: word n-grams (n = 1..=3) over the
//! stopword-filtered tokens, then character n-grams (n = 1..=3) over the
//! tokens joined by single spaces. Within a block, grams are indexed in
//! lexicographic order. An n-gram is kept when its document frequency lies
//! in `[min_df, max_df]`, and weighted by `idf = ln((1 + n_docs)/(1 + df)) + 1`.
//! A transformed vector is `tf · idf`, L2-normalized across both blocks.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAX_N: usize = 3;
pub const FILE_HEADER: &str = "# hitkit-tfidf v1";

const ENGLISH_STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "but", "by", "for", "from", "has", "have", "he", "her",
    "his", "i", "in", "is", "it", "its", "me", "my", "of", "on", "or", "our", "she", "so", "that", "the",
    "their", "them", "they", "this", "to", "was", "we", "were", "will", "with", "you", "your",
];

/// Words excluded from the word block.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Stopwords(BTreeSet<String>);

impl Stopwords {
    pub fn none() -> Self {
        Self::default()
    }

    /// The bundled English list.
    pub fn english() -> Self {
        Self(ENGLISH_STOPWORDS.iter().map(|s| s.to_string()).collect())
    }

    /// Adds one word per non-blank line of `path` (`#` starts a comment).
    pub fn extend_from_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for line in text.lines() {
            let w = line.split('#').next().unwrap_or("").trim();
            if !w.is_empty() {
                self.0.insert(w.to_lowercase());
            }
        }
        Ok(())
    }

    pub fn contains(&self, w: &str) -> bool {
        self.0.contains(w)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }
}

impl<S: Into<String>> FromIterator<S> for Stopwords {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self(iter.into_iter().map(Into::into).collect())
    }
}

/// A document-frequency bound: an absolute count or a fraction of the
/// corpus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DocLimit {
    Count(usize),
    Fraction(f64),
}

impl DocLimit {
    fn resolve(self, n_docs: usize) -> f64 {
        match self {
            Self::Count(c) => c as f64,
            Self::Fraction(f) => f * n_docs as f64,
        }
    }

    pub fn render(self) -> String {
        match self {
            Self::Count(c) => c.to_string(),
            Self::Fraction(f) => format!("{f}f"),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.strip_suffix('f') {
            Some(f) => f.parse().ok().map(Self::Fraction),
            None => s.parse().ok().map(Self::Count),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TfidfConfig {
    pub min_df: DocLimit,
    pub max_df: DocLimit,
}

impl Default for TfidfConfig {
    fn default() -> Self {
        Self { min_df: DocLimit::Count(2), max_df: DocLimit::Count(6) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Block {
    Word,
    Char,
}

impl Block {
    fn tag(self) -> &'static str {
        match self {
            Self::Word => "word",
            Self::Char => "char",
        }
    }
}

/// One retained n-gram.
#[derive(Clone, Debug, PartialEq)]
pub struct Gram {
    pub block: Block,
    pub n: usize,
    pub text: String,
    pub df: usize,
}

/// Fitted n-gram vocabulary. `grams[i]` has feature index `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct TfidfVocab {
    pub config: TfidfConfig,
    pub n_docs: usize,
    pub grams: Vec<Gram>,
    pub idf: Vec<f64>,
    pub stopwords: Stopwords,
    index: HashMap<(Block, String), usize>,
}

/// Sparse feature vector with indices in increasing order.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseVec {
    pub dim: usize,
    pub entries: Vec<(usize, f64)>,
}

impl SparseVec {
    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for &(i, x) in &self.entries {
            v[i] = x;
        }
        v
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, x)| x * x).sum::<f64>().sqrt()
    }
}

pub fn idf(n_docs: usize, df: usize) -> f64 {
    ((1.0 + n_docs as f64) / (1.0 + df as f64)).ln() + 1.0
}

fn word_grams(tokens: &[String], stop: &Stopwords) -> BTreeMap<String, (usize, usize)> {
    let kept: Vec<&str> = tokens.iter().map(String::as_str).filter(|t| !stop.contains(t)).collect();
    let mut out: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for n in 1..=MAX_N {
        for w in kept.windows(n) {
            out.entry(w.join(" ")).or_insert((n, 0)).1 += 1;
        }
    }
    out
}

fn char_grams(tokens: &[String]) -> BTreeMap<String, (usize, usize)> {
    let chars: Vec<char> = tokens.join(" ").chars().collect();
    let mut out: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for n in 1..=MAX_N {
        for w in chars.windows(n) {
            out.entry(w.iter().collect()).or_insert((n, 0)).1 += 1;
        }
    }
    out
}

/// Counts of every n-gram of both blocks in one document: gram → (n, tf).
fn doc_grams(tokens: &[String], stop: &Stopwords) -> [(Block, BTreeMap<String, (usize, usize)>); 2] {
    [(Block::Word, word_grams(tokens, stop)), (Block::Char, char_grams(tokens))]
}

impl TfidfVocab {
    pub fn fit(corpus: &[Vec<String>], stopwords: Stopwords, config: TfidfConfig) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("cannot fit tf-idf on an empty corpus"));
        }
        let n_docs = corpus.len();
        let mut df: BTreeMap<(Block, String), (usize, usize)> = BTreeMap::new();
        for doc in corpus {
            for (block, grams) in doc_grams(doc, &stopwords) {
                for (g, (n, _)) in grams {
                    df.entry((block, g)).or_insert((n, 0)).1 += 1;
                }
            }
        }
        let (lo, hi) = (config.min_df.resolve(n_docs), config.max_df.resolve(n_docs));
        // BTreeMap order is (block, gram): the word block first, grams lexicographic.
        let grams: Vec<Gram> = df
            .into_iter()
            .filter(|(_, (_, d))| (lo..=hi).contains(&(*d as f64)))
            .map(|((block, text), (n, df))| Gram { block, n, text, df })
            .collect();
        Ok(Self::assemble(config, n_docs, grams, stopwords))
    }

    fn assemble(config: TfidfConfig, n_docs: usize, grams: Vec<Gram>, stopwords: Stopwords) -> Self {
        let idf = grams.iter().map(|g| idf(n_docs, g.df)).collect();
        let index = grams.iter().enumerate().map(|(i, g)| ((g.block, g.text.clone()), i)).collect();
        Self { config, n_docs, grams, idf, stopwords, index }
    }

    pub fn dim(&self) -> usize {
        self.grams.len()
    }

    pub fn lookup(&self, block: Block, gram: &str) -> Option<usize> {
        self.index.get(&(block, gram.to_string())).copied()
    }

    pub fn transform(&self, tokens: &[String]) -> SparseVec {
        let mut entries = Vec::new();
        for (block, grams) in doc_grams(tokens, &self.stopwords) {
            for (g, (_, tf)) in grams {
                if let Some(&i) = self.index.get(&(block, g)) {
                    entries.push((i, tf as f64 * self.idf[i]));
                }
            }
        }
        entries.sort_by_key(|e| e.0);
        let norm = entries.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for e in &mut entries {
                e.1 /= norm;
            }
        }
        SparseVec { dim: self.dim(), entries }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{FILE_HEADER} n_docs={} min_df={} max_df={} idf=ln((1+n_docs)/(1+df))+1 tf=raw norm=l2\n",
            self.n_docs,
            self.config.min_df.render(),
            self.config.max_df.render()
        );
        let stop: Vec<&str> = self.stopwords.iter().collect();
        let _ = writeln!(s, "# stopwords {}", stop.join(" "));
        for (i, g) in self.grams.iter().enumerate() {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", g.block.tag(), g.n, g.text, g.df, i);
        }
        s
    }

    pub fn from_text(path: &Path, text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Parse { path: path.to_path_buf(), line, msg: msg.to_string() };
        let mut lines = text.lines();
        let header = lines.next().filter(|h| h.starts_with(FILE_HEADER)).ok_or_else(|| bad(1, "not a tf-idf vocabulary"))?;
        let field = |k: &str| header.split_whitespace().find_map(|f| f.strip_prefix(k));
        let n_docs = field("n_docs=").and_then(|v| v.parse().ok()).ok_or_else(|| bad(1, "missing n_docs"))?;
        let min_df = field("min_df=").and_then(DocLimit::parse).ok_or_else(|| bad(1, "missing min_df"))?;
        let max_df = field("max_df=").and_then(DocLimit::parse).ok_or_else(|| bad(1, "missing max_df"))?;
        let stop_line = lines.next().and_then(|l| l.strip_prefix("# stopwords")).ok_or_else(|| bad(2, "missing stopwords"))?;
        let stopwords: Stopwords = stop_line.split_whitespace().collect();
        let mut grams = Vec::new();
        for (k, line) in lines.enumerate() {
            let no = k + 3;
            let cols: Vec<&str> = line.split('\t').collect();
            let [block, n, text, df, idx] = cols[..] else {
                return Err(bad(no, "expected block, n, gram, df, idx"));
            };
            let block = match block {
                "word" => Block::Word,
                "char" => Block::Char,
                _ => return Err(bad(no, "block must be word or char")),
            };
            let n: usize = n.parse().map_err(|_| bad(no, "bad n"))?;
            let df: usize = df.parse().map_err(|_| bad(no, "bad df"))?;
            if idx.parse::<usize>().ok() != Some(grams.len()) {
                return Err(bad(no, "indices must be dense and in order"));
            }
            grams.push(Gram { block, n, text: text.to_string(), df });
        }
        Ok(Self::assemble(TfidfConfig { min_df, max_df }, n_docs, grams, stopwords))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(path, &text)
    }
}
