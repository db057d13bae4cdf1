//! Generalization regimes: masked language modeling, zero-shot label
//! entailment and encoder transfer.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::vocab::{MASK, NUM_SPECIALS, PAD};
use crate::data::{EncodedExample, Vocab};
use crate::encoders::{HitEncoder, CHAR_PREFIX, WORD_PREFIX};
use crate::error::{Error, Result};
use crate::tasks::IGNORE_INDEX;
use crate::tensor::{Checkpoint, Graph, ParamStore, Var};

pub const SELECT_PROB: f64 = 0.15;
pub const MASK_PROB: f64 = 0.8;
pub const RANDOM_PROB: f64 = 0.1;
pub const DEFAULT_TAU: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskAction {
    Mask,
    /// Replaced by the given non-special word ID.
    Random(usize),
    Keep,
}

/// Which positions were selected and what happened to each.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub positions: Vec<usize>,
    pub actions: Vec<MaskAction>,
    pub seed: u64,
}

/// Independently selects each non-special token with probability 0.15;
/// a selected token becomes `[MASK]` (80%), a uniform non-special word
/// (10%) or stays (10%). Targets hold the original ID at selected
/// positions and [`IGNORE_INDEX`] elsewhere.
pub fn mask_tokens(tokens: &[usize], vocab_size: usize, seed: u64) -> Result<(Vec<usize>, Vec<i64>, MaskPlan)> {
    if !tokens.iter().any(|&t| t >= NUM_SPECIALS) {
        return Err(Error::invalid("nothing to mask: the sequence holds only special tokens"));
    }
    if vocab_size <= NUM_SPECIALS {
        return Err(Error::invalid("the vocabulary has no ordinary words to sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut input = tokens.to_vec();
    let mut targets = vec![IGNORE_INDEX; tokens.len()];
    let mut plan = MaskPlan { positions: Vec::new(), actions: Vec::new(), seed };
    for (i, &t) in tokens.iter().enumerate() {
        if t < NUM_SPECIALS || rng.gen::<f64>() >= SELECT_PROB {
            continue;
        }
        let u: f64 = rng.gen();
        let action = if u < MASK_PROB {
            MaskAction::Mask
        } else if u < MASK_PROB + RANDOM_PROB {
            MaskAction::Random(rng.gen_range(NUM_SPECIALS..vocab_size))
        } else {
            MaskAction::Keep
        };
        input[i] = match action {
            MaskAction::Mask => MASK,
            MaskAction::Random(r) => r,
            MaskAction::Keep => t,
        };
        targets[i] = t as i64;
        plan.positions.push(i);
        plan.actions.push(action);
    }
    Ok((input, targets, plan))
}

/// Rewrites the selected positions of `ex`: `[MASK]` spells as the single
/// `[MASK]` character, a random replacement with that word's characters.
pub fn apply_mask(ex: &EncodedExample, plan: &MaskPlan, vocab: &Vocab, max_word_len: usize) -> EncodedExample {
    let mut out = ex.clone();
    for (&i, &a) in plan.positions.iter().zip(&plan.actions) {
        let (id, tok) = match a {
            MaskAction::Mask => (MASK, "[MASK]".to_string()),
            MaskAction::Random(r) => (r, vocab.word(r).to_string()),
            MaskAction::Keep => continue,
        };
        out.word_ids[i] = id;
        let chars = vocab.char_ids(&tok, max_word_len);
        for (j, slot) in out.char_ids[i].iter_mut().enumerate() {
            *slot = chars.get(j).copied().unwrap_or(PAD);
        }
        out.tokens[i] = tok;
    }
    out
}

/// One entailment training pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZslPair {
    pub example: usize,
    pub label: usize,
    pub entail: bool,
}

/// Per example, one entail pair with its gold label plus `neg_per_pos`
/// contradict pairs with labels drawn uniformly from the other labels.
pub fn zsl_build_pairs(gold: &[usize], n_labels: usize, rng: &mut impl Rng, neg_per_pos: usize) -> Result<Vec<ZslPair>> {
    zsl_build_task_pairs(gold, std::slice::from_ref(&(0..n_labels)), rng, neg_per_pos)
}

/// As [`zsl_build_pairs`] for several tasks sharing one label index space:
/// `tasks` are disjoint label ranges, and negatives are drawn only from the
/// wrong labels of the gold label's own task.
pub fn zsl_build_task_pairs(
    gold: &[usize],
    tasks: &[Range<usize>],
    rng: &mut impl Rng,
    neg_per_pos: usize,
) -> Result<Vec<ZslPair>> {
    if let Some(t) = tasks.iter().find(|t| t.len() < 2) {
        return Err(Error::invalid(format!("zero-shot task {t:?} needs at least two labels")));
    }
    let mut out = Vec::with_capacity(gold.len() * (1 + neg_per_pos));
    for (i, &g) in gold.iter().enumerate() {
        let task = tasks
            .iter()
            .find(|t| t.contains(&g))
            .ok_or_else(|| Error::invalid(format!("label {g} belongs to no task in {tasks:?}")))?;
        out.push(ZslPair { example: i, label: g, entail: true });
        for _ in 0..neg_per_pos {
            let mut l = task.start + rng.gen_range(0..task.len() - 1);
            if l >= g {
                l += 1;
            }
            out.push(ZslPair { example: i, label: l, entail: false });
        }
    }
    Ok(out)
}

/// Cosine of the two neural sentence embeddings, as a `[1]` tape value.
pub fn zsl_similarity(g: &mut Graph, encoder: &HitEncoder, text: &EncodedExample, label: &EncodedExample) -> Result<Var> {
    let a = encoder.sentence_embed(g, text, None)?;
    let b = encoder.sentence_embed(g, label, None)?;
    g.cosine(a, b)
}

pub fn zsl_score(store: &ParamStore, encoder: &HitEncoder, text: &EncodedExample, label: &EncodedExample) -> Result<f64> {
    let mut g = Graph::inference(store);
    let s = zsl_similarity(&mut g, encoder, text, label)?;
    Ok(g.value(s).data()[0])
}

/// Binary cross-entropy of `σ(cos/τ)` against the pair's polarity.
pub fn zsl_loss(
    g: &mut Graph,
    encoder: &HitEncoder,
    text: &EncodedExample,
    label: &EncodedExample,
    entail: bool,
    tau: f64,
) -> Result<Var> {
    let s = zsl_similarity(g, encoder, text, label)?;
    let logit = g.scale(s, 1.0 / tau);
    g.bce_with_logits(logit, &[if entail { 1.0 } else { 0.0 }])
}

/// Index of the label phrase with the highest score.
pub fn zsl_predict(store: &ParamStore, encoder: &HitEncoder, text: &EncodedExample, labels: &[EncodedExample]) -> Result<usize> {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, l) in labels.iter().enumerate() {
        let s = zsl_score(store, encoder, text, l)?;
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    Frozen,
    Finetune,
}

impl std::str::FromStr for TransferMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(Self::Frozen),
            "finetune" => Ok(Self::Finetune),
            _ => Err(Error::invalid(format!("unknown transfer mode `{s}` (expected frozen or finetune)"))),
        }
    }
}

pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with(&format!("{CHAR_PREFIX}.")) || name.starts_with(&format!("{WORD_PREFIX}."))
}

/// Copies every encoder parameter from `ckpt`; head parameters keep their
/// fresh initialization. Frozen mode marks the encoder non-trainable.
/// Returns the number of tensors copied.
pub fn transfer_load(store: &mut ParamStore, ckpt: &Checkpoint, mode: TransferMode) -> Result<usize> {
    let n = ckpt.load_into(store, is_encoder_param)?;
    let trainable = mode == TransferMode::Finetune;
    store.set_trainable(&format!("{CHAR_PREFIX}."), trainable);
    store.set_trainable(&format!("{WORD_PREFIX}."), trainable);
    Ok(n)
}
