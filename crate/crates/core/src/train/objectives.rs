use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::eval::train_accuracy;
use super::fit::{derive_seed, mean_loss, train_batches, Objective};
use crate::data::{EncodedExample, Vocab};
use crate::encoders::HitEncoder;
use crate::error::{Error, Result};
use crate::pretrain::{apply_mask, mask_tokens, zsl_build_task_pairs, zsl_loss, ZslPair};
use crate::tasks::{MlmModel, TaskModel};
use crate::tensor::{Adam, ParamStore};

/// Batching knobs shared by every objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Batching {
    pub batch_size: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

fn tail(v: &[Vec<f64>], i: usize) -> Option<&[f64]> {
    v.get(i).map(Vec::as_slice).filter(|t| !t.is_empty())
}

/// Task loss on labeled examples. `*_tfidf` are either empty or hold one
/// feature vector per example.
pub struct Supervised<'a> {
    pub model: &'a TaskModel,
    pub train: &'a [EncodedExample],
    pub train_tfidf: &'a [Vec<f64>],
    pub val: &'a [EncodedExample],
    pub val_tfidf: &'a [Vec<f64>],
    pub batching: Batching,
    /// Stop once train accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    pub max_out: usize,
}

impl Objective for Supervised<'_> {
    fn train_epoch(&mut self, store: &mut ParamStore, opt: &Adam, epoch: usize) -> Result<f64> {
        let b = self.batching;
        let (model, data, tfidf) = (self.model, self.train, self.train_tfidf);
        train_batches(store, opt, data.len(), b.batch_size, b.grad_clip, b.seed, epoch, |g, i| {
            model.loss(g, &data[i], tail(tfidf, i)).map(Some)
        })
    }

    fn val_loss(&mut self, store: &ParamStore) -> Result<f64> {
        let (model, data, tfidf) = (self.model, self.val, self.val_tfidf);
        mean_loss(store, data.len(), |g, i| model.loss(g, &data[i], tail(tfidf, i)).map(Some))
    }

    fn target_reached(&mut self, store: &ParamStore) -> Result<bool> {
        match self.target_accuracy {
            None => Ok(false),
            Some(t) => Ok(train_accuracy(store, self.model, self.train, self.train_tfidf, self.max_out)? >= t),
        }
    }
}

/// Masked-token prediction. Training masks are redrawn every epoch;
/// validation masks are fixed for the whole run.
pub struct MaskedLm<'a> {
    pub model: &'a MlmModel,
    pub vocab: &'a Vocab,
    pub train: &'a [EncodedExample],
    pub val: &'a [EncodedExample],
    pub batching: Batching,
    pub max_word_len: usize,
}

const VAL_STREAM: u64 = u64::MAX;

fn masked(ex: &EncodedExample, vocab: &Vocab, max_word_len: usize, seed: u64) -> Option<(EncodedExample, Vec<i64>)> {
    let (_, targets, plan) = mask_tokens(ex.words(), vocab.num_words(), seed).ok()?;
    if plan.positions.is_empty() {
        return None;
    }
    Some((apply_mask(ex, &plan, vocab, max_word_len), targets))
}

impl Objective for MaskedLm<'_> {
    fn train_epoch(&mut self, store: &mut ParamStore, opt: &Adam, epoch: usize) -> Result<f64> {
        let b = self.batching;
        let (model, vocab, data, mwl) = (self.model, self.vocab, self.train, self.max_word_len);
        let seed = derive_seed(b.seed, &[1]);
        train_batches(store, opt, data.len(), b.batch_size, b.grad_clip, b.seed, epoch, |g, i| {
            let Some((ex, targets)) = masked(&data[i], vocab, mwl, derive_seed(seed, &[epoch as u64, i as u64])) else {
                return Ok(None);
            };
            model.loss(g, &ex, &targets).map(Some)
        })
    }

    fn val_loss(&mut self, store: &ParamStore) -> Result<f64> {
        let (model, vocab, data, mwl) = (self.model, self.vocab, self.val, self.max_word_len);
        let seed = derive_seed(self.batching.seed, &[1]);
        mean_loss(store, data.len(), |g, i| {
            let Some((ex, targets)) = masked(&data[i], vocab, mwl, derive_seed(seed, &[VAL_STREAM, i as u64])) else {
                return Ok(None);
            };
            model.loss(g, &ex, &targets).map(Some)
        })
        .map_err(|e| match e {
            Error::EmptyLoss => Error::invalid("the validation corpus produced no masked tokens"),
            e => e,
        })
    }
}

/// Entail/contradict pairs between texts and label phrases. Negatives are
/// resampled every epoch; validation pairs are fixed.
pub struct ZeroShot<'a> {
    pub encoder: &'a HitEncoder,
    pub phrases: &'a [EncodedExample],
    /// Disjoint ranges of `phrases`; negatives stay inside the gold task.
    pub tasks: Vec<Range<usize>>,
    pub train: &'a [EncodedExample],
    pub train_gold: &'a [usize],
    pub val: &'a [EncodedExample],
    pub val_pairs: Vec<ZslPair>,
    pub neg_per_pos: usize,
    pub tau: f64,
    pub batching: Batching,
}

impl<'a> ZeroShot<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        encoder: &'a HitEncoder,
        phrases: &'a [EncodedExample],
        tasks: Vec<Range<usize>>,
        train: &'a [EncodedExample],
        train_gold: &'a [usize],
        val: &'a [EncodedExample],
        val_gold: &[usize],
        neg_per_pos: usize,
        tau: f64,
        batching: Batching,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(batching.seed, &[2, VAL_STREAM]));
        let val_pairs = zsl_build_task_pairs(val_gold, &tasks, &mut rng, neg_per_pos)?;
        Ok(Self { encoder, phrases, tasks, train, train_gold, val, val_pairs, neg_per_pos, tau, batching })
    }
}

impl Objective for ZeroShot<'_> {
    fn train_epoch(&mut self, store: &mut ParamStore, opt: &Adam, epoch: usize) -> Result<f64> {
        let b = self.batching;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(b.seed, &[2, epoch as u64]));
        let pairs = zsl_build_task_pairs(self.train_gold, &self.tasks, &mut rng, self.neg_per_pos)?;
        let (enc, texts, phrases, tau) = (self.encoder, self.train, self.phrases, self.tau);
        train_batches(store, opt, pairs.len(), b.batch_size, b.grad_clip, b.seed, epoch, |g, i| {
            let p = pairs[i];
            zsl_loss(g, enc, &texts[p.example], &phrases[p.label], p.entail, tau).map(Some)
        })
    }

    fn val_loss(&mut self, store: &ParamStore) -> Result<f64> {
        let (enc, texts, phrases, tau, pairs) = (self.encoder, self.val, self.phrases, self.tau, &self.val_pairs);
        mean_loss(store, pairs.len(), |g, i| {
            let p = pairs[i];
            zsl_loss(g, enc, &texts[p.example], &phrases[p.label], p.entail, tau).map(Some)
        })
    }
}
