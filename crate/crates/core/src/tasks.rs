//! Task heads over the HIT encoder: sentence classification (mean-pooled,
//! optionally with a tf-idf tail), token labeling, masked-token prediction
//! and an encoder-decoder generator with greedy decoding.
//!
//! Head parameters live under `head.`; the generator's decoder under
//! `decoder.`. Loss targets use `-1` as the ignored position.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttnMask, CrossAttention, FameLayer};
use crate::data::vocab::{CLS, EOS, UNK};
use crate::data::{EncodedExample, TaskKind, Target};
use crate::encoders::{positional_table, EncoderConfig, FeedForward, HitEncoder, LayerNorm, Linear};
use crate::error::{Error, Result};
use crate::tensor::{init, Graph, ParamId, ParamStore, Var};

pub const IGNORE_INDEX: i64 = -1;
pub const DECODER_PREFIX: &str = "decoder";
pub const HEAD_PREFIX: &str = "head";

fn softmax_rows(g: &mut Graph, logits: Var) -> Result<Vec<Vec<f64>>> {
    let p = g.softmax(logits, 1)?;
    let t = g.value(p);
    let (r, _) = t.as_matrix_dims();
    Ok((0..r).map(|i| t.row(i).to_vec()).collect())
}

/// Mean-pooled sentence representation, optional tf-idf tail, dense layer
/// to `C` classes.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub encoder: HitEncoder,
    pub out: Linear,
    pub n_classes: usize,
    pub tfidf_dim: usize,
}

impl Classifier {
    pub fn new(store: &mut ParamStore, encoder: HitEncoder, n_classes: usize, tfidf_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::invalid("a classifier needs at least one class"));
        }
        let d = encoder.cfg.d_model + tfidf_dim;
        let out = Linear::new(store, &format!("{HEAD_PREFIX}.out"), d, n_classes, rng)?;
        Ok(Self { encoder, out, n_classes, tfidf_dim })
    }

    fn tail<'a>(&self, tfidf: Option<&'a [f64]>) -> Result<Option<&'a [f64]>> {
        match (self.tfidf_dim, tfidf) {
            (0, _) => Ok(None),
            (d, Some(f)) if f.len() == d => Ok(Some(f)),
            (d, f) => Err(Error::invalid(format!(
                "classifier expects a tf-idf vector of length {d}, got {}",
                f.map_or(0, <[f64]>::len)
            ))),
        }
    }

    /// `1×C` logits.
    pub fn logits(&self, g: &mut Graph, ex: &EncodedExample, tfidf: Option<&[f64]>) -> Result<Var> {
        let tail = self.tail(tfidf)?;
        let s = self.encoder.sentence_embed(g, ex, tail)?;
        self.out.forward(g, s)
    }

    pub fn loss(&self, g: &mut Graph, ex: &EncodedExample, tfidf: Option<&[f64]>) -> Result<Var> {
        let Target::Class(c) = ex.target else {
            return Err(Error::invalid(format!("example `{}` has no class label", ex.id)));
        };
        let logits = self.logits(g, ex, tfidf)?;
        g.cross_entropy(logits, &[c as i64], None)
    }

    pub fn probabilities(&self, store: &ParamStore, ex: &EncodedExample, tfidf: Option<&[f64]>) -> Result<Vec<f64>> {
        let mut g = Graph::inference(store);
        let logits = self.logits(&mut g, ex, tfidf)?;
        Ok(softmax_rows(&mut g, logits)?.remove(0))
    }
}

/// Per-token dense layer to `T` tags.
#[derive(Clone, Debug)]
pub struct Tagger {
    pub encoder: HitEncoder,
    pub out: Linear,
    pub n_tags: usize,
}

impl Tagger {
    pub fn new(store: &mut ParamStore, encoder: HitEncoder, n_tags: usize, rng: &mut impl Rng) -> Result<Self> {
        if n_tags == 0 {
            return Err(Error::invalid("a tagger needs at least one tag"));
        }
        let out = Linear::new(store, &format!("{HEAD_PREFIX}.out"), encoder.cfg.d_model, n_tags, rng)?;
        Ok(Self { encoder, out, n_tags })
    }

    /// `n×T` logits over the unpadded positions.
    pub fn logits(&self, g: &mut Graph, ex: &EncodedExample) -> Result<Var> {
        let h = self.encoder.forward(g, ex)?;
        self.out.forward(g, h)
    }

    pub fn loss(&self, g: &mut Graph, ex: &EncodedExample) -> Result<Var> {
        let Target::Tags(tags) = &ex.target else {
            return Err(Error::invalid(format!("example `{}` has no tag sequence", ex.id)));
        };
        if tags.len() != ex.len() {
            return Err(Error::invalid(format!(
                "example `{}`: {} tags for {} tokens",
                ex.id,
                tags.len(),
                ex.len()
            )));
        }
        let logits = self.logits(g, ex)?;
        let t: Vec<i64> = tags.iter().map(|&t| t as i64).collect();
        g.cross_entropy(logits, &t, Some(IGNORE_INDEX))
    }

    pub fn probabilities(&self, store: &ParamStore, ex: &EncodedExample) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::inference(store);
        let logits = self.logits(&mut g, ex)?;
        softmax_rows(&mut g, logits)
    }
}

/// Word-vocabulary projection for masked-token prediction. Independent of
/// the embedding table.
#[derive(Clone, Debug)]
pub struct MlmModel {
    pub encoder: HitEncoder,
    pub out: Linear,
}

impl MlmModel {
    pub fn new(store: &mut ParamStore, encoder: HitEncoder, rng: &mut impl Rng) -> Result<Self> {
        let v = encoder.word_hit.n_words;
        let out = Linear::new(store, &format!("{HEAD_PREFIX}.mlm"), encoder.cfg.d_model, v, rng)?;
        Ok(Self { encoder, out })
    }

    pub fn logits(&self, g: &mut Graph, ex: &EncodedExample) -> Result<Var> {
        let h = self.encoder.forward(g, ex)?;
        self.out.forward(g, h)
    }

    /// Cross-entropy at the positions whose target is not [`IGNORE_INDEX`].
    pub fn loss(&self, g: &mut Graph, ex: &EncodedExample, targets: &[i64]) -> Result<Var> {
        if targets.len() != ex.len() {
            return Err(Error::invalid(format!("{} MLM targets for {} tokens", targets.len(), ex.len())));
        }
        let logits = self.logits(g, ex)?;
        g.cross_entropy(logits, targets, Some(IGNORE_INDEX))
    }

    /// `n×V` vocabulary distributions.
    pub fn predict(&self, store: &ParamStore, ex: &EncodedExample) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::inference(store);
        let logits = self.logits(&mut g, ex)?;
        softmax_rows(&mut g, logits)
    }
}

/// Causal FAME self-attention, cross-attention onto the encoder output and
/// a feed-forward block, each with dropout, residual and layer norm.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: FameLayer,
    pub cross: CrossAttention,
    pub ffn: FeedForward,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub norm3: LayerNorm,
    pub dropout: f64,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            self_attn: FameLayer::new(store, &format!("{prefix}.self_attention"), cfg.fame(cfg.max_len), rng)?,
            cross: CrossAttention::new(store, &format!("{prefix}.cross_attention"), d, cfg.n_heads, rng)?,
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), d, cfg.d_ff, rng)?,
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), d)?,
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), d)?,
            norm3: LayerNorm::new(store, &format!("{prefix}.norm3"), d)?,
            dropout: cfg.dropout,
        })
    }

    pub fn forward(&self, g: &mut Graph, y: Var, memory: Var) -> Result<Var> {
        let n = g.shape(y)[0];
        let a = self.self_attn.forward(g, y, &AttnMask::causal(n))?;
        let a = g.dropout(a, self.dropout)?;
        let y1 = g.add(y, a)?;
        let y1 = self.norm1.forward(g, y1)?;
        let c = self.cross.forward(g, y1, memory)?;
        let c = g.dropout(c, self.dropout)?;
        let y2 = g.add(y1, c)?;
        let y2 = self.norm2.forward(g, y2)?;
        let f = self.ffn.forward(g, y2)?;
        let f = g.dropout(f, self.dropout)?;
        let y3 = g.add(y2, f)?;
        self.norm3.forward(g, y3)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub embedding: ParamId,
    pub n_words: usize,
    pub layers: Vec<DecoderLayer>,
    pub out: Linear,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, n_words: usize, l_dec: usize, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d_model;
        let embedding = store.add(format!("{DECODER_PREFIX}.embedding"), init::normal(n_words, d, 0.1, rng))?;
        let layers = (0..l_dec)
            .map(|i| DecoderLayer::new(store, &format!("{DECODER_PREFIX}.layer{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        let out = Linear::new(store, &format!("{DECODER_PREFIX}.out"), d, n_words, rng)?;
        Ok(Self { embedding, n_words, layers, out })
    }

    /// `t×V` next-token logits for the prefix `ids`.
    pub fn forward(&self, g: &mut Graph, ids: &[usize], memory: Var) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::invalid("decoder input must hold at least [CLS]"));
        }
        let table = g.param(self.embedding);
        let ids: Vec<usize> = ids.iter().map(|&i| if i < self.n_words { i } else { UNK }).collect();
        let e = g.gather(table, &ids)?;
        let d = g.shape(e)[1];
        let pe = g.constant(positional_table(ids.len(), d));
        let mut y = g.add(e, pe)?;
        for layer in &self.layers {
            y = layer.forward(g, y, memory)?;
        }
        self.out.forward(g, y)
    }
}

/// Encoder-decoder generator over a shared word vocabulary.
#[derive(Clone, Debug)]
pub struct Seq2Seq {
    pub encoder: HitEncoder,
    pub decoder: Decoder,
}

impl Seq2Seq {
    pub fn new(store: &mut ParamStore, encoder: HitEncoder, n_words: usize, l_dec: usize, rng: &mut impl Rng) -> Result<Self> {
        let decoder = Decoder::new(store, &encoder.cfg, n_words, l_dec, rng)?;
        Ok(Self { encoder, decoder })
    }

    /// Teacher-forced logits: row `t` predicts `target[t + 1]`.
    pub fn logits(&self, g: &mut Graph, ex: &EncodedExample, target: &[usize]) -> Result<Var> {
        let memory = self.encoder.forward(g, ex)?;
        self.decoder.forward(g, target, memory)
    }

    pub fn loss(&self, g: &mut Graph, ex: &EncodedExample) -> Result<Var> {
        let Target::Tokens(t) = &ex.target else {
            return Err(Error::invalid(format!("example `{}` has no target sequence", ex.id)));
        };
        if t.len() < 2 {
            return Err(Error::invalid(format!("example `{}`: target needs [CLS] and [EOS]", ex.id)));
        }
        let logits = self.logits(g, ex, &t[..t.len() - 1])?;
        let labels: Vec<i64> = t[1..].iter().map(|&x| x as i64).collect();
        g.cross_entropy(logits, &labels, None)
    }

    /// Greedy decoding from `[CLS]` until `[EOS]` or `max_out` tokens.
    /// Returns the tokens strictly between the two markers.
    pub fn greedy_decode(&self, store: &ParamStore, ex: &EncodedExample, max_out: usize) -> Result<Vec<usize>> {
        let mut g = Graph::inference(store);
        let memory = self.encoder.forward(&mut g, ex)?;
        let mut seq = vec![CLS];
        while seq.len() <= max_out {
            let logits = self.decoder.forward(&mut g, &seq, memory)?;
            let next = argmax(g.value(logits).row(seq.len() - 1));
            if next == EOS {
                break;
            }
            seq.push(next);
        }
        Ok(seq.split_off(1))
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub task: TaskKind,
    pub encoder: EncoderConfig,
    pub n_words: usize,
    pub n_chars: usize,
    /// Classes or tags; unused for generation.
    pub n_labels: usize,
    /// Length of the tf-idf tail; 0 disables it.
    pub tfidf_dim: usize,
    pub l_dec: usize,
}

#[derive(Clone, Debug)]
pub enum TaskModel {
    Classifier(Classifier),
    Tagger(Tagger),
    Generator(Seq2Seq),
}

impl TaskModel {
    /// Registers parameters in a fixed order: encoder, then head.
    pub fn build(store: &mut ParamStore, spec: &ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        let encoder = HitEncoder::new(store, spec.encoder, spec.n_words, spec.n_chars, rng)?;
        Ok(match spec.task {
            TaskKind::Classification => Self::Classifier(Classifier::new(store, encoder, spec.n_labels, spec.tfidf_dim, rng)?),
            TaskKind::Labeling => Self::Tagger(Tagger::new(store, encoder, spec.n_labels, rng)?),
            TaskKind::Generation => Self::Generator(Seq2Seq::new(store, encoder, spec.n_words, spec.l_dec, rng)?),
        })
    }

    pub fn encoder(&self) -> &HitEncoder {
        match self {
            Self::Classifier(m) => &m.encoder,
            Self::Tagger(m) => &m.encoder,
            Self::Generator(m) => &m.encoder,
        }
    }

    pub fn loss(&self, g: &mut Graph, ex: &EncodedExample, tfidf: Option<&[f64]>) -> Result<Var> {
        match self {
            Self::Classifier(m) => m.loss(g, ex, tfidf),
            Self::Tagger(m) => m.loss(g, ex),
            Self::Generator(m) => m.loss(g, ex),
        }
    }
}

/// Index of the largest entry (first on ties).
pub fn argmax(xs: &[f64]) -> usize {
    (0..xs.len()).fold(0, |b, i| if xs[i] > xs[b] { i } else { b })
}

