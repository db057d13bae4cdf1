use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::preprocess::Preprocessor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Bot,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

/// Builds the `j`-th (1-based) bot response pair.
///
/// The input is `[CLS]`, every turn before the `j`-th bot turn in order,
/// then `[EOS]`. Whole oldest turns are dropped until the input fits in
/// `max_len`; if the newest turn alone is too long, its oldest tokens go.
/// The target is `[CLS] b_j [EOS]`, with `b_j` cut from the right to fit.
pub fn flatten_dialog(
    turns: &[Turn],
    j: usize,
    prep: &Preprocessor,
    max_len: usize,
) -> Result<(Vec<String>, Vec<String>)> {
    if max_len < 2 {
        return Err(Error::invalid("max_len must leave room for [CLS] and [EOS]"));
    }
    let bots: Vec<usize> = (0..turns.len()).filter(|&i| turns[i].speaker == Speaker::Bot).collect();
    if j == 0 || j > bots.len() {
        return Err(Error::invalid(format!(
            "bot turn {j} out of range: the dialog has {} bot turns",
            bots.len()
        )));
    }
    let at = bots[j - 1];
    let budget = max_len - 2;
    let mut history: Vec<Vec<String>> = turns[..at].iter().map(|t| prep.tokenize(&t.text)).collect();
    let mut total: usize = history.iter().map(Vec::len).sum();
    while total > budget && history.len() > 1 {
        total -= history.remove(0).len();
    }
    let mut body: Vec<String> = history.into_iter().flatten().collect();
    if body.len() > budget {
        body.drain(..body.len() - budget);
    }
    let mut input = Vec::with_capacity(body.len() + 2);
    input.push("[CLS]".to_string());
    input.extend(body);
    input.push("[EOS]".to_string());

    let mut reply = prep.tokenize(&turns[at].text);
    reply.truncate(budget);
    let mut target = Vec::with_capacity(reply.len() + 2);
    target.push("[CLS]".to_string());
    target.extend(reply);
    target.push("[EOS]".to_string());
    Ok((input, target))
}

/// IOB tags for `tokens` given slot values.
///
/// Slots are visited in name order; each value (preprocessed) claims its
/// leftmost exact contiguous match among still-untagged tokens. Values that
/// match nowhere leave no tags.
pub fn iob_encode(tokens: &[String], slots: &BTreeMap<String, String>, prep: &Preprocessor) -> Vec<String> {
    let mut tags = vec!["O".to_string(); tokens.len()];
    for (slot, value) in slots {
        let want = prep.tokenize(value);
        let k = want.len();
        if k == 0 || k > tokens.len() {
            log::debug!("slot `{slot}` value {value:?} does not fit the utterance");
            continue;
        }
        let hit = (0..=tokens.len() - k)
            .find(|&s| tokens[s..s + k] == want[..] && tags[s..s + k].iter().all(|t| t == "O"));
        match hit {
            Some(s) => {
                tags[s] = format!("B-{slot}");
                for t in &mut tags[s + 1..s + k] {
                    *t = format!("I-{slot}");
                }
            }
            None => log::debug!("slot `{slot}` value {value:?} not found in the utterance"),
        }
    }
    tags
}

/// True when every `I-x` directly follows `B-x` or `I-x`.
pub fn is_valid_iob(tags: &[String]) -> bool {
    let mut prev: Option<&str> = None;
    for t in tags {
        if let Some(name) = t.strip_prefix("I-") {
            match prev {
                Some(p) if p.strip_prefix("B-") == Some(name) || p.strip_prefix("I-") == Some(name) => {}
                _ => return false,
            }
        }
        prev = Some(t);
    }
    true
}
