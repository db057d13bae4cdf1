use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const EOS: usize = 3;
pub const MASK: usize = 4;
pub const NUM_SPECIALS: usize = 5;
pub const SPECIALS: [&str; NUM_SPECIALS] = ["[PAD]", "[UNK]", "[CLS]", "[EOS]", "[MASK]"];

pub const WORDS_FILE: &str = "vocab.words.tsv";
pub const CHARS_FILE: &str = "vocab.chars.tsv";

fn special_id(tok: &str) -> Option<usize> {
    SPECIALS.iter().position(|s| *s == tok)
}

/// Token table with the five specials at fixed IDs, followed by entries in
/// descending frequency then lexicographic order.
#[derive(Clone, Debug, PartialEq)]
struct Table {
    tokens: Vec<String>,
    freq: Vec<u64>,
    index: HashMap<String, usize>,
}

impl Table {
    fn from_counts(counts: BTreeMap<String, u64>, min_freq: u64) -> Self {
        let mut entries: Vec<(String, u64)> =
            counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut freq = vec![0; NUM_SPECIALS];
        for (t, c) in entries {
            tokens.push(t);
            freq.push(c);
        }
        Self::from_parts(tokens, freq)
    }

    fn from_parts(tokens: Vec<String>, freq: Vec<u64>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, freq, index }
    }

    fn to_tsv(&self, kind: &str, min_freq: u64) -> String {
        let mut s = format!(
            "# hitkit-vocab v1 kind={kind} min_freq={min_freq} specials={}\n",
            SPECIALS.join(",")
        );
        for (i, (t, f)) in self.tokens.iter().zip(&self.freq).enumerate() {
            s.push_str(&format!("{t}\t{i}\t{f}\n"));
        }
        s
    }

    fn from_tsv(path: &Path, text: &str, kind: &str) -> Result<(Self, u64)> {
        let bad = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad(1, "missing header".into()))?;
        let mut min_freq = None;
        let mut seen_kind = None;
        for field in header.trim_start_matches('#').split_whitespace() {
            if let Some(v) = field.strip_prefix("kind=") {
                seen_kind = Some(v.to_string());
            } else if let Some(v) = field.strip_prefix("min_freq=") {
                min_freq = v.parse().ok();
            }
        }
        if !header.starts_with("# hitkit-vocab v1") || seen_kind.as_deref() != Some(kind) {
            return Err(bad(1, format!("expected a `{kind}` vocab header")));
        }
        let mut tokens = Vec::new();
        let mut freq = Vec::new();
        for (n, line) in lines.enumerate() {
            let lineno = n + 2;
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(bad(lineno, "expected token<TAB>id<TAB>frequency".into()));
            }
            let id: usize = cols[1].parse().map_err(|_| bad(lineno, "bad id".into()))?;
            if id != tokens.len() {
                return Err(bad(lineno, format!("ids must be dense; expected {}", tokens.len())));
            }
            let f: u64 = cols[2].parse().map_err(|_| bad(lineno, "bad frequency".into()))?;
            tokens.push(cols[0].to_string());
            freq.push(f);
        }
        if tokens.len() < NUM_SPECIALS || tokens[..NUM_SPECIALS] != SPECIALS {
            return Err(bad(2, "specials must occupy ids 0..5".into()));
        }
        let table = Self::from_parts(tokens, freq);
        if table.index.len() != table.tokens.len() {
            return Err(bad(2, "duplicate token".into()));
        }
        Ok((table, min_freq.unwrap_or(1)))
    }
}

/// Word and character vocabularies sharing the special IDs.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Table,
    chars: Table,
    min_freq: u64,
}

impl Vocab {
    /// Words below `min_freq` get no word ID, but their characters are
    /// still counted.
    pub fn build(corpus: &[Vec<String>], min_freq: u64) -> Result<Self> {
        if corpus.iter().all(|s| s.is_empty()) {
            return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
        }
        let mut words: BTreeMap<String, u64> = BTreeMap::new();
        let mut chars: BTreeMap<String, u64> = BTreeMap::new();
        for tok in corpus.iter().flatten() {
            if special_id(tok).is_some() {
                continue;
            }
            *words.entry(tok.clone()).or_default() += 1;
            for c in tok.chars() {
                *chars.entry(c.to_string()).or_default() += 1;
            }
        }
        Ok(Self {
            words: Table::from_counts(words, min_freq.max(1)),
            chars: Table::from_counts(chars, 1),
            min_freq: min_freq.max(1),
        })
    }

    pub fn num_words(&self) -> usize {
        self.words.tokens.len()
    }

    pub fn num_chars(&self) -> usize {
        self.chars.tokens.len()
    }

    pub fn min_freq(&self) -> u64 {
        self.min_freq
    }

    pub fn word_id(&self, tok: &str) -> usize {
        self.words.index.get(tok).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.tokens.get(id).map_or(SPECIALS[UNK], |s| s.as_str())
    }

    pub fn word_freq(&self, id: usize) -> u64 {
        self.words.freq.get(id).copied().unwrap_or(0)
    }

    pub fn char_id(&self, c: char) -> usize {
        let mut buf = [0u8; 4];
        self.chars.index.get(&*c.encode_utf8(&mut buf)).copied().unwrap_or(UNK)
    }

    pub fn char_token(&self, id: usize) -> &str {
        self.chars.tokens.get(id).map_or(SPECIALS[UNK], |s| s.as_str())
    }

    /// Character IDs of a word, truncated to `max_word_len`. A special token
    /// is spelled as the single matching special character ID.
    pub fn char_ids(&self, tok: &str, max_word_len: usize) -> Vec<usize> {
        if let Some(id) = special_id(tok) {
            return vec![id];
        }
        tok.chars().take(max_word_len).map(|c| self.char_id(c)).collect()
    }

    pub fn words_tsv(&self) -> String {
        self.words.to_tsv("word", self.min_freq)
    }

    pub fn chars_tsv(&self) -> String {
        self.chars.to_tsv("char", self.min_freq)
    }

    /// Writes `vocab.words.tsv` and `vocab.chars.tsv` into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        for (name, body) in [(WORDS_FILE, self.words_tsv()), (CHARS_FILE, self.chars_tsv())] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map(|s| (p.clone(), s)).map_err(|e| Error::io(&p, e))
        };
        let (wp, wt) = read(WORDS_FILE)?;
        let (cp, ct) = read(CHARS_FILE)?;
        let (words, min_freq) = Table::from_tsv(&wp, &wt, "word")?;
        let (chars, _) = Table::from_tsv(&cp, &ct, "char")?;
        Ok(Self { words, chars, min_freq })
    }
}
