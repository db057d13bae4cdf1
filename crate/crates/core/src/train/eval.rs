use rayon::prelude::*;
use serde::Serialize;

use crate::data::vocab::{CLS, EOS};
use crate::data::{EncodedExample, LabelSet, Target, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{self, ConfusionMatrix, MetricsReport};
use crate::tasks::{argmax, TaskModel};
use crate::tensor::ParamStore;

/// What a model produced for one example.
#[derive(Clone, Debug, PartialEq)]
pub enum Output {
    Class { label: usize, probabilities: Vec<f64> },
    Tags { tags: Vec<usize>, probabilities: Vec<Vec<f64>> },
    Tokens(Vec<usize>),
}

/// One line of a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PredictionRecord {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<serde_json::Value>,
}

pub fn predict(store: &ParamStore, model: &TaskModel, ex: &EncodedExample, tfidf: Option<&[f64]>, max_out: usize) -> Result<Output> {
    Ok(match model {
        TaskModel::Classifier(m) => {
            let p = m.probabilities(store, ex, tfidf)?;
            Output::Class { label: argmax(&p), probabilities: p }
        }
        TaskModel::Tagger(m) => {
            let p = m.probabilities(store, ex)?;
            Output::Tags { tags: p.iter().map(|r| argmax(r)).collect(), probabilities: p }
        }
        TaskModel::Generator(m) => Output::Tokens(m.greedy_decode(store, ex, max_out)?),
    })
}

fn tail(v: &[Vec<f64>], i: usize) -> Option<&[f64]> {
    v.get(i).map(Vec::as_slice).filter(|t| !t.is_empty())
}

pub fn predict_all(
    store: &ParamStore,
    model: &TaskModel,
    examples: &[EncodedExample],
    tfidf: &[Vec<f64>],
    max_out: usize,
) -> Result<Vec<Output>> {
    (0..examples.len())
        .into_par_iter()
        .map(|i| predict(store, model, &examples[i], tail(tfidf, i), max_out))
        .collect()
}

/// Reference tokens of a generation target without the boundary markers.
pub fn reference_tokens(target: &[usize]) -> &[usize] {
    let start = usize::from(target.first() == Some(&CLS));
    let end = target.iter().position(|&t| t == EOS).unwrap_or(target.len()).max(start);
    &target[start..end]
}

fn hit(ex: &EncodedExample, out: &Output) -> Result<(usize, usize)> {
    Ok(match (&ex.target, out) {
        (Target::Class(g), Output::Class { label, .. }) => (usize::from(g == label), 1),
        (Target::Tags(g), Output::Tags { tags, .. }) => (g.iter().zip(tags).filter(|(a, b)| a == b).count(), g.len()),
        (Target::Tokens(t), Output::Tokens(p)) => (usize::from(reference_tokens(t) == p.as_slice()), 1),
        _ => return Err(Error::invalid(format!("example `{}` has no target matching the model", ex.id))),
    })
}

/// Example accuracy for classification, token accuracy for labeling and
/// exact match for generation.
pub fn train_accuracy(
    store: &ParamStore,
    model: &TaskModel,
    examples: &[EncodedExample],
    tfidf: &[Vec<f64>],
    max_out: usize,
) -> Result<f64> {
    let outs = predict_all(store, model, examples, tfidf, max_out)?;
    let (mut h, mut n) = (0, 0);
    for (ex, o) in examples.iter().zip(&outs) {
        let (a, b) = hit(ex, o)?;
        h += a;
        n += b;
    }
    Ok(if n == 0 { 0.0 } else { h as f64 / n as f64 })
}

fn words(vocab: &Vocab, ids: &[usize]) -> Vec<String> {
    ids.iter().map(|&i| vocab.word(i).to_string()).collect()
}

/// Scores `examples` and renders one prediction record per example.
pub fn evaluate(
    store: &ParamStore,
    model: &TaskModel,
    examples: &[EncodedExample],
    tfidf: &[Vec<f64>],
    labels: &LabelSet,
    vocab: &Vocab,
    max_out: usize,
    config_text: &str,
) -> Result<(MetricsReport, Vec<PredictionRecord>)> {
    if examples.is_empty() {
        return Err(Error::invalid("nothing to evaluate: the dataset is empty"));
    }
    let outs = predict_all(store, model, examples, tfidf, max_out)?;
    let names = labels.names();
    let mut preds = Vec::with_capacity(examples.len());
    let task = match model {
        TaskModel::Classifier(_) => "classification",
        TaskModel::Tagger(_) => "labeling",
        TaskModel::Generator(_) => "generation",
    };
    let mut report = MetricsReport::new(task, config_text);
    report.metadata.insert("examples".into(), examples.len().to_string());
    let (mut gold, mut pred) = (Vec::new(), Vec::new());
    let (mut cands, mut refs) = (Vec::new(), Vec::new());
    for (ex, out) in examples.iter().zip(&outs) {
        let mut rec = PredictionRecord { id: ex.id.clone(), label: None, tags: None, tokens: None, probabilities: None };
        match (&ex.target, out) {
            (Target::Class(g), Output::Class { label, probabilities }) => {
                gold.push(*g);
                pred.push(*label);
                rec.label = Some(names[*label].clone());
                rec.probabilities = Some(serde_json::to_value(probabilities)?);
            }
            (Target::Tags(g), Output::Tags { tags, probabilities }) => {
                if g.len() != tags.len() {
                    return Err(Error::invalid(format!("example `{}`: tag count mismatch", ex.id)));
                }
                gold.extend(g);
                pred.extend(tags);
                rec.tags = Some(tags.iter().map(|&t| names[t].clone()).collect());
                rec.probabilities = Some(serde_json::to_value(probabilities)?);
            }
            (Target::Tokens(t), Output::Tokens(p)) => {
                cands.push(words(vocab, p));
                refs.push(words(vocab, reference_tokens(t)));
                rec.tokens = cands.last().cloned();
            }
            _ => return Err(Error::invalid(format!("example `{}` has no target matching the model", ex.id))),
        }
        preds.push(rec);
    }
    if cands.is_empty() {
        let prf = metrics::macro_prf(&gold, &pred, names.len())?;
        let acc = metrics::accuracy(&gold, &pred);
        report.metrics.insert(if task == "labeling" { "token_accuracy" } else { "accuracy" }.into(), acc);
        report.metrics.insert("macro_precision".into(), prf.precision);
        report.metrics.insert("macro_recall".into(), prf.recall);
        report.metrics.insert("macro_f1".into(), prf.f1);
        report.confusion = Some(ConfusionMatrix::new(&gold, &pred, names)?);
    } else {
        let wrapped: Vec<Vec<Vec<String>>> = refs.iter().map(|r| vec![r.clone()]).collect();
        report.metrics.insert("bleu".into(), metrics::bleu(&cands, &wrapped, 4)?);
        report.metrics.insert("rouge_l".into(), metrics::corpus_mean(&cands, &refs, metrics::rouge_l));
        report.metrics.insert("meteor_lite".into(), metrics::corpus_mean(&cands, &refs, metrics::meteor_lite));
        let exact = cands.iter().zip(&refs).filter(|(c, r)| c == r).count();
        report.metrics.insert("exact_match".into(), exact as f64 / cands.len() as f64);
        report.metadata.insert("bleu_smoothing".into(), metrics::BLEU_SMOOTHING.into());
        report.metadata.insert("meteor_variant".into(), metrics::METEOR_VARIANT.into());
    }
    Ok((report, preds))
}

pub fn predictions_jsonl(records: &[PredictionRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
