use std::sync::OnceLock;

use regex::Regex;

/// Boundary markers that survive preprocessing untouched.
pub const MARKERS: [&str; 2] = ["[CLS]", "[EOS]"];

fn punctuation() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\p{P}").expect("punctuation class"))
}

/// Text normalizer for informal social-media input.
///
/// Drops URL tokens (`http://`, `https://`, `www.` prefixes) and
/// `@`-mentions, strips every Unicode punctuation character (except inside
/// the `[CLS]`/`[EOS]` markers), optionally lowercases, and splits on
/// whitespace.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Preprocessor {
    pub lowercase: bool,
}

impl Default for Preprocessor {
    fn default() -> Self {
        Self { lowercase: true }
    }
}

impl Preprocessor {
    pub fn tokenize(&self, raw: &str) -> Vec<String> {
        let mut out = Vec::new();
        for tok in raw.split_whitespace() {
            if let Some(m) = MARKERS.iter().find(|m| m.eq_ignore_ascii_case(tok)) {
                out.push((*m).to_string());
                continue;
            }
            let lower = tok.to_lowercase();
            if lower.starts_with("http://")
                || lower.starts_with("https://")
                || lower.starts_with("www.")
                || lower.starts_with('@')
            {
                continue;
            }
            let base = if self.lowercase { lower } else { tok.to_string() };
            let cleaned = punctuation().replace_all(&base, "");
            if !cleaned.is_empty() {
                out.push(cleaned.into_owned());
            }
        }
        out
    }
}

/// [`Preprocessor::tokenize`] with default settings.
pub fn preprocess_text(raw: &str) -> Vec<String> {
    Preprocessor::default().tokenize(raw)
}
