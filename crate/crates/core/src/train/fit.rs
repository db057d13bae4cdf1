use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::schedule::Schedule;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor::{clip_grad_norm, Adam, Graph, ParamStore, Var};

/// A training signal the generic loop can drive.
pub trait Objective {
    /// One pass over the training data. Returns the mean training loss.
    fn train_epoch(&mut self, store: &mut ParamStore, opt: &Adam, epoch: usize) -> Result<f64>;

    fn val_loss(&mut self, store: &ParamStore) -> Result<f64>;

    /// Optional success criterion checked after every epoch; reaching it
    /// ends the run with the current weights.
    fn target_reached(&mut self, _store: &ParamStore) -> Result<bool> {
        Ok(false)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
}

impl From<&TrainConfig> for FitOptions {
    fn from(c: &TrainConfig) -> Self {
        Self {
            epochs: c.epochs,
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            plateau_factor: c.plateau_factor,
            plateau_patience: c.plateau_patience,
            early_stop_patience: c.early_stop_patience,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Rate used during this epoch.
    pub lr: f64,
    pub improved: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EpochCap,
    EarlyStop,
    TargetReached,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
}

impl History {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Runs `objective` under the plateau/early-stop schedule. Unless the
/// objective's target ends the run, the best-validation weights are
/// restored before returning.
pub fn fit(store: &mut ParamStore, objective: &mut dyn Objective, opts: FitOptions) -> Result<History> {
    let mut sched = Schedule::new(opts.lr, opts.plateau_factor, opts.plateau_patience, opts.early_stop_patience);
    let mut records = Vec::new();
    let mut best = store.snapshot();
    let mut reason = StopReason::EpochCap;
    for epoch in 0..opts.epochs {
        let lr = sched.lr;
        let opt = Adam { lr, beta1: opts.beta1, beta2: opts.beta2, ..Adam::default() };
        let train_loss = objective.train_epoch(store, &opt, epoch)?;
        let val_loss = objective.val_loss(store)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let step = sched.step(epoch, val_loss);
        if step.improved {
            best = store.snapshot();
        }
        records.push(EpochRecord { epoch, train_loss, val_loss, lr, improved: step.improved });
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {lr:.3e}");
        if objective.target_reached(store)? {
            reason = StopReason::TargetReached;
            break;
        }
        if step.stop {
            reason = StopReason::EarlyStop;
            break;
        }
    }
    let best_epoch = sched.best_epoch.ok_or_else(|| Error::invalid("training ran for zero epochs"))?;
    if reason != StopReason::TargetReached {
        store.restore(&best);
    }
    Ok(History { epochs: records, best_epoch, best_val_loss: sched.best, stop_reason: reason })
}

/// SplitMix64 over the parts; gives every (run, epoch, item) its own
/// dropout and sampling stream.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base;
    for &p in parts {
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

/// Shuffled mini-batch pass over items `0..n`. `item_loss` returns `None`
/// for items that contribute nothing this epoch. Per-item gradients are
/// computed in parallel and summed in item order, so results do not
/// depend on the thread count. Each batch minimizes the mean item loss.
pub fn train_batches<F>(
    store: &mut ParamStore,
    opt: &Adam,
    n: usize,
    batch_size: usize,
    grad_clip: f64,
    seed: u64,
    epoch: usize,
    item_loss: F,
) -> Result<f64>
where
    F: Fn(&mut Graph, usize) -> Result<Option<Var>> + Sync,
{
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64])));
    let (mut total, mut count) = (0.0, 0usize);
    for batch in order.chunks(batch_size.max(1)) {
        let shared: &ParamStore = store;
        let results: Vec<_> = batch
            .par_iter()
            .map(|&i| -> Result<Option<(f64, crate::tensor::Gradients)>> {
                let mut g = Graph::training(shared, derive_seed(seed, &[epoch as u64, i as u64]));
                let Some(loss) = item_loss(&mut g, i)? else {
                    return Ok(None);
                };
                let value = g.value(loss).data()[0];
                Ok(Some((value, g.backward(loss)?)))
            })
            .collect::<Result<Vec<_>>>()?;
        let used: Vec<_> = results.into_iter().flatten().collect();
        if used.is_empty() {
            continue;
        }
        let scale = 1.0 / used.len() as f64;
        for (value, grads) in &used {
            total += value;
            count += 1;
            store.accumulate(grads);
        }
        for p in store.iter_mut() {
            if let Some(g) = p.grad.as_mut() {
                g.iter_mut().for_each(|x| *x *= scale);
            }
        }
        clip_grad_norm(store, grad_clip);
        opt.step(store)?;
    }
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok(total / count as f64)
}

/// Mean of `item_loss` over items `0..n` on inference tapes.
pub fn mean_loss<F>(store: &ParamStore, n: usize, item_loss: F) -> Result<f64>
where
    F: Fn(&mut Graph, usize) -> Result<Option<Var>> + Sync,
{
    let values = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut g = Graph::inference(store);
            Ok(item_loss(&mut g, i)?.map(|l| g.value(l).data()[0]))
        })
        .collect::<Result<Vec<_>>>()?;
    let used: Vec<f64> = values.into_iter().flatten().collect();
    if used.is_empty() {
        return Err(Error::EmptyLoss);
    }
    Ok(used.iter().sum::<f64>() / used.len() as f64)
}
