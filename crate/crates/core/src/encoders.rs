//! Character-level and word-level HIT encoder stacks.
//!
//! Each word is spelled out as character IDs, encoded by a character-level
//! stack shared across every word slot, and pooled by learned-context
//! attention into one vector `h_c`. The word-level stack then consumes
//! `x_i = h_c(w_i) + h_w(w_i) + p_i`, the sum of that vector, a word
//! embedding and a sinusoidal position code.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttnMask, FameConfig, FameLayer, OpaCombine, OpaScore};
use crate::data::vocab::{PAD, UNK};
use crate::data::EncodedExample;
use crate::error::{Error, Result};
use crate::tensor::{init, Graph, ParamId, ParamStore, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Shape and regularization of both encoder stacks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub l_c: usize,
    pub l_w: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub opa_score: OpaScore,
    pub opa_combine: OpaCombine,
    pub max_len: usize,
    pub max_word_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            l_c: 1,
            l_w: 2,
            d_ff: 512,
            dropout: 0.2,
            opa_score: OpaScore::Tanh,
            opa_combine: OpaCombine::TrueOuterProjected,
            max_len: 40,
            max_word_len: 20,
        }
    }
}

impl EncoderConfig {
    pub fn fame(&self, max_len: usize) -> FameConfig {
        FameConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            opa_score: self.opa_score,
            opa_combine: self.opa_combine,
            max_len,
        }
    }
}

/// Affine layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(&[d]))?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// Dense layer `x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            w: store.add(format!("{prefix}.w"), init::xavier(d_in, d_out, rng))?,
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[d_out]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let y = g.matmul(x, w)?;
        g.add_row_vec(y, b)
    }
}

/// Position-wise `relu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, d_ff: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            inner: Linear::new(store, &format!("{prefix}.inner"), d, d_ff, rng)?,
            outer: Linear::new(store, &format!("{prefix}.outer"), d_ff, d, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, x)?;
        let h = g.relu(h);
        self.outer.forward(g, h)
    }
}

/// FAME block followed by a feed-forward block, each wrapped in dropout, a
/// residual connection and layer normalization.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub fame: FameLayer,
    pub ffn: FeedForward,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        fame: FameConfig,
        d_ff: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::DropoutRate(dropout));
        }
        let d = fame.d_model;
        Ok(Self {
            fame: FameLayer::new(store, &format!("{prefix}.attention"), fame, rng)?,
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), d, d_ff, rng)?,
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), d)?,
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), d)?,
            dropout,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: &AttnMask) -> Result<Var> {
        let a = self.fame.forward(g, x, mask)?;
        let a = g.dropout(a, self.dropout)?;
        let y1 = g.add(x, a)?;
        let y1 = self.norm1.forward(g, y1)?;
        let f = self.ffn.forward(g, y1)?;
        let f = g.dropout(f, self.dropout)?;
        let y = g.add(y1, f)?;
        self.norm2.forward(g, y)
    }
}

/// Learned-context attention pooling: `a = softmax(tanh(H·P + b)·u)` over
/// unmasked rows, output `Σ aᵢ hᵢ` as a `1×d` row.
#[derive(Clone, Debug)]
pub struct HierPool {
    pub proj: ParamId,
    pub bias: ParamId,
    pub context: ParamId,
}

impl HierPool {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            proj: store.add(format!("{prefix}.proj"), init::xavier(d, d, rng))?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d]))?,
            context: store.add(format!("{prefix}.context"), init::xavier(d, 1, rng))?,
        })
    }

    /// Pooling weights as an `N×1` column.
    pub fn weights(&self, g: &mut Graph, h: Var, keys: Option<&[bool]>) -> Result<Var> {
        let n = g.shape(h)[0];
        let (proj, bias, context) = (g.param(self.proj), g.param(self.bias), g.param(self.context));
        let u = g.matmul(h, proj)?;
        let u = g.add_row_vec(u, bias)?;
        let u = g.tanh(u);
        let mut s = g.matmul(u, context)?;
        if let Some(keys) = keys {
            if keys.len() != n {
                return Err(Error::Shape { op: "hier_pool mask", lhs: vec![n], rhs: vec![keys.len()] });
            }
            if !keys.iter().any(|&k| k) {
                return Err(Error::AllMasked);
            }
            if keys.iter().any(|&k| !k) {
                let bias = keys.iter().map(|&k| if k { 0.0 } else { f64::NEG_INFINITY }).collect();
                let bias = g.constant(Tensor::new(vec![n, 1], bias)?);
                s = g.add(s, bias)?;
            }
        }
        g.softmax(s, 0)
    }

    pub fn forward(&self, g: &mut Graph, h: Var, keys: Option<&[bool]>) -> Result<Var> {
        let a = self.weights(g, h, keys)?;
        let at = g.transpose(a)?;
        g.matmul(at, h)
    }
}

/// Sinusoidal code: `PE[2i] = sin(pos/10000^(2i/d))`, `PE[2i+1] = cos(..)`.
pub fn positional_encoding(pos: usize, d: usize) -> Tensor {
    let data = (0..d)
        .map(|j| {
            let i2 = (j - j % 2) as f64;
            let angle = pos as f64 / 10000f64.powf(i2 / d as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect();
    Tensor::new(vec![d], data).expect("positional encoding shape")
}

/// Rows `0..n` of the positional code as an `n×d` matrix.
pub fn positional_table(n: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * d);
    for p in 0..n {
        data.extend_from_slice(positional_encoding(p, d).data());
    }
    Tensor::new(vec![n, d], data).expect("positional table shape")
}

fn clamp_ids(ids: &[usize], rows: usize) -> Vec<usize> {
    ids.iter().map(|&i| if i < rows { i } else { UNK }).collect()
}

/// Character-level stack, one instance shared by every word slot.
#[derive(Clone, Debug)]
pub struct CharHit {
    pub embedding: ParamId,
    pub n_chars: usize,
    pub layers: Vec<EncoderLayer>,
    pub pool: HierPool,
}

impl CharHit {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, n_chars: usize, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d_model;
        let embedding = store.add(format!("{prefix}.embedding"), init::normal(n_chars, d, 0.1, rng))?;
        let layers = (0..cfg.l_c)
            .map(|i| {
                EncoderLayer::new(store, &format!("{prefix}.layer{i}"), cfg.fame(cfg.max_word_len), cfg.d_ff, cfg.dropout, rng)
            })
            .collect::<Result<_>>()?;
        let pool = HierPool::new(store, &format!("{prefix}.pool"), d, rng)?;
        Ok(Self { embedding, n_chars, layers, pool })
    }

    /// One word's pooled representation as a `1×d` row.
    pub fn encode_word(&self, g: &mut Graph, chars: &[usize]) -> Result<Var> {
        if chars.is_empty() {
            return Err(Error::invalid("cannot encode a word with no characters"));
        }
        let table = g.param(self.embedding);
        let e = g.gather(table, &clamp_ids(chars, self.n_chars))?;
        let d = g.shape(e)[1];
        let pe = g.constant(positional_table(chars.len(), d));
        let mut h = g.add(e, pe)?;
        let mask = AttnMask::all(chars.len());
        for layer in &self.layers {
            h = layer.forward(g, h, &mask)?;
        }
        self.pool.forward(g, h, None)
    }
}

/// Word-level stack.
#[derive(Clone, Debug)]
pub struct WordHit {
    pub embedding: ParamId,
    pub n_words: usize,
    pub layers: Vec<EncoderLayer>,
}

impl WordHit {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, n_words: usize, rng: &mut impl Rng) -> Result<Self> {
        let embedding = store.add(format!("{prefix}.embedding"), init::normal(n_words, cfg.d_model, 0.1, rng))?;
        let layers = (0..cfg.l_w)
            .map(|i| EncoderLayer::new(store, &format!("{prefix}.layer{i}"), cfg.fame(cfg.max_len), cfg.d_ff, cfg.dropout, rng))
            .collect::<Result<_>>()?;
        Ok(Self { embedding, n_words, layers })
    }
}

pub const CHAR_PREFIX: &str = "char_hit";
pub const WORD_PREFIX: &str = "word_hit";

/// The two stacks wired together. Parameters live under `char_hit.` and
/// `word_hit.`.
#[derive(Clone, Debug)]
pub struct HitEncoder {
    pub cfg: EncoderConfig,
    pub char_hit: CharHit,
    pub word_hit: WordHit,
}

impl HitEncoder {
    pub fn new(store: &mut ParamStore, cfg: EncoderConfig, n_words: usize, n_chars: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.fame(cfg.max_len).validate()?;
        if cfg.d_ff == 0 || cfg.max_len == 0 || cfg.max_word_len == 0 {
            return Err(Error::invalid("d_ff, max_len and max_word_len must be positive"));
        }
        Ok(Self {
            char_hit: CharHit::new(store, CHAR_PREFIX, &cfg, n_chars, rng)?,
            word_hit: WordHit::new(store, WORD_PREFIX, &cfg, n_words, rng)?,
            cfg,
        })
    }

    /// Input rows `x_i = h_c + h_w + p_i` before the word-level layers.
    /// Positions with no characters are spelled as a lone `[PAD]`.
    pub fn word_inputs(&self, g: &mut Graph, words: &[usize], chars: &[&[usize]]) -> Result<Var> {
        let n = words.len();
        if n == 0 {
            return Err(Error::invalid("cannot encode an empty word sequence"));
        }
        if chars.len() != n {
            return Err(Error::Shape { op: "word_inputs", lhs: vec![n], rhs: vec![chars.len()] });
        }
        if n > self.cfg.max_len {
            return Err(Error::invalid(format!("{n} words exceed max_len {}", self.cfg.max_len)));
        }
        // Without dropout, equal spellings give equal vectors; encode each once.
        let share = !g.is_training();
        let mut cache: HashMap<&[usize], Var> = HashMap::new();
        let mut rows = Vec::with_capacity(n);
        for &c in chars {
            let c: &[usize] = if c.is_empty() { &[PAD] } else { c };
            let v = match cache.get(c) {
                Some(&v) => v,
                None => {
                    let v = self.char_hit.encode_word(g, c)?;
                    if share {
                        cache.insert(c, v);
                    }
                    v
                }
            };
            rows.push(v);
        }
        let hc = g.concat_rows(&rows)?;
        let table = g.param(self.word_hit.embedding);
        let hw = g.gather(table, &clamp_ids(words, self.word_hit.n_words))?;
        let pe = g.constant(positional_table(n, self.cfg.d_model));
        let x = g.add(hc, hw)?;
        g.add(x, pe)
    }

    /// Word-level representations `n×d`. `keys` hides positions from
    /// attention (their own rows are still computed).
    pub fn encode(&self, g: &mut Graph, words: &[usize], chars: &[&[usize]], keys: Option<&[bool]>) -> Result<Var> {
        let mut h = self.word_inputs(g, words, chars)?;
        let mask = match keys {
            Some(k) => AttnMask::from_keys(k.to_vec()),
            None => AttnMask::all(words.len()),
        };
        for layer in &self.word_hit.layers {
            h = layer.forward(g, h, &mask)?;
        }
        Ok(h)
    }

    /// Representations of the unpadded positions of `ex`.
    pub fn forward(&self, g: &mut Graph, ex: &EncodedExample) -> Result<Var> {
        let chars: Vec<&[usize]> = (0..ex.len()).map(|i| ex.chars(i)).collect();
        self.encode(g, ex.words(), &chars, None)
    }

    /// Mean of the word representations, optionally followed by a tf-idf
    /// tail: a `1×(d + |tfidf|)` row.
    pub fn sentence_embed(&self, g: &mut Graph, ex: &EncodedExample, tfidf: Option<&[f64]>) -> Result<Var> {
        let h = self.forward(g, ex)?;
        let n = g.shape(h)[0];
        let s = g.sum_rows(h)?;
        let mean = g.scale(s, 1.0 / n as f64);
        match tfidf {
            Some(f) if !f.is_empty() => {
                let tail = g.constant(Tensor::new(vec![1, f.len()], f.to_vec())?);
                g.concat_cols(&[mean, tail])
            }
            _ => Ok(mean),
        }
    }
}
