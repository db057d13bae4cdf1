//! End-to-end runs behind the command-line subcommands. Each run reads
//! its inputs from a [`TrainConfig`] and writes artifacts into one output
//! directory.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, predictions_jsonl};
use super::fit::{derive_seed, fit, FitOptions, History};
use super::objectives::{Batching, MaskedLm, Supervised, ZeroShot};
use super::TrainConfig;
use crate::data::{
    encode_all, encode_tokens, load_dataset, prepare_all, split, vocab_corpus, DatasetKind, EncodedExample, LabelSet,
    Prepared, PreparedTarget, Preprocessor, Target, TaskKind, Vocab,
};
use crate::encoders::{EncoderConfig, HitEncoder};
use crate::error::{Error, Result};
use crate::features::{Stopwords, TfidfVocab};
use crate::metrics::{self, MetricsReport};
use crate::pretrain::{apply_mask, mask_tokens, transfer_load, zsl_predict};
use crate::tasks::{argmax, MlmModel, ModelSpec, TaskModel};
use crate::tensor::{Checkpoint, Graph, ParamStore};

pub const CHECKPOINT_FILE: &str = "checkpoint";
pub const HISTORY_FILE: &str = "history.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";
pub const GENERATIONS_FILE: &str = "generations.txt";
pub const ANALYSIS_FILE: &str = "analysis.json";
pub const TFIDF_FILE: &str = "tfidf.tsv";
pub const CONFIG_FILE: &str = "config.txt";

/// What kind of run produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Task,
    Mlm,
    Zsl,
}

/// Stored in the checkpoint; enough to rebuild the parameter layout and
/// the preprocessing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub role: Role,
    pub task: Option<TaskKind>,
    pub encoder: EncoderConfig,
    pub n_words: usize,
    pub n_chars: usize,
    pub n_labels: usize,
    pub tfidf_dim: usize,
    pub l_dec: usize,
    pub labels: Vec<String>,
    pub lowercase: bool,
}

impl RunMeta {
    fn spec(&self) -> Result<ModelSpec> {
        let task = self.task.ok_or_else(|| Error::invalid("this run holds a pretrained encoder, not a task model"))?;
        Ok(ModelSpec {
            task,
            encoder: self.encoder,
            n_words: self.n_words,
            n_chars: self.n_chars,
            n_labels: self.n_labels,
            tfidf_dim: self.tfidf_dim,
            l_dec: self.l_dec,
        })
    }
}

pub enum RunModel {
    Task(TaskModel),
    Mlm(MlmModel),
    Zsl(HitEncoder),
}

/// A run directory read back into memory.
pub struct LoadedRun {
    pub meta: RunMeta,
    pub store: ParamStore,
    pub model: RunModel,
    pub vocab: Vocab,
    pub tfidf: Option<TfidfVocab>,
}

impl LoadedRun {
    pub fn load(dir: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
        let meta: RunMeta = serde_json::from_value(ckpt.metadata.clone())
            .map_err(|e| Error::Checkpoint(format!("{}: unreadable run metadata: {e}", dir.display())))?;
        let vocab = Vocab::load_dir(dir)?;
        let tfidf = if meta.tfidf_dim > 0 { Some(TfidfVocab::load(&dir.join(TFIDF_FILE))?) } else { None };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = match meta.role {
            Role::Task => RunModel::Task(TaskModel::build(&mut store, &meta.spec()?, &mut rng)?),
            Role::Mlm => {
                let enc = HitEncoder::new(&mut store, meta.encoder, meta.n_words, meta.n_chars, &mut rng)?;
                RunModel::Mlm(MlmModel::new(&mut store, enc, &mut rng)?)
            }
            Role::Zsl => RunModel::Zsl(HitEncoder::new(&mut store, meta.encoder, meta.n_words, meta.n_chars, &mut rng)?),
        };
        ckpt.load_into(&mut store, |_| true)?;
        Ok(Self { meta, store, model, vocab, tfidf })
    }

    pub fn encoder(&self) -> &HitEncoder {
        match &self.model {
            RunModel::Task(m) => m.encoder(),
            RunModel::Mlm(m) => &m.encoder,
            RunModel::Zsl(e) => e,
        }
    }

    pub fn preprocessor(&self) -> Preprocessor {
        Preprocessor { lowercase: self.meta.lowercase }
    }

    /// Neural sentence embedding of one line; `None` when nothing survives
    /// preprocessing.
    pub fn embed(&self, text: &str) -> Result<Option<Vec<f64>>> {
        let tokens = self.preprocessor().tokenize(text);
        let Some(ex) = encode_tokens("line", &tokens, &self.vocab, limits(&self.meta.encoder)) else {
            return Ok(None);
        };
        let mut g = Graph::inference(&self.store);
        let e = self.encoder().sentence_embed(&mut g, &ex, None)?;
        Ok(Some(g.value(e).data().to_vec()))
    }
}

fn limits(e: &EncoderConfig) -> crate::data::Limits {
    crate::data::Limits { max_len: e.max_len, max_word_len: e.max_word_len }
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn prepare_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

/// Rounds every weight to the precision a checkpoint stores, so metrics
/// computed in-process match a reloaded run exactly.
fn round_to_stored(store: &mut ParamStore) {
    for p in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
    }
}

fn save_checkpoint(out: &Path, store: &ParamStore, meta: &RunMeta) -> Result<()> {
    Checkpoint::from_store(store, serde_json::to_value(meta)?).save(&out.join(CHECKPOINT_FILE))
}

/// Train and validation splits in string form.
struct Splits {
    train: Vec<Prepared>,
    val: Vec<Prepared>,
}

fn load_prepared(cfg: &TrainConfig, path: &Path, task: TaskKind) -> Result<Vec<Prepared>> {
    let prep = Preprocessor { lowercase: cfg.lowercase };
    let records = load_dataset(path, cfg.dataset_kind)?;
    prepare_all(&records, task, &prep, cfg.limits())
}

fn load_splits(cfg: &TrainConfig, task: TaskKind) -> Result<Splits> {
    let train_path = cfg.require("train_path", &cfg.train_path)?;
    let train = load_prepared(cfg, train_path, task)?;
    if train.is_empty() {
        return Err(Error::invalid(format!("{}: the training set is empty", train_path.display())));
    }
    let (train, val) = match &cfg.val_path {
        Some(p) => (train, load_prepared(cfg, p, task)?),
        None if cfg.val_ratio > 0.0 => {
            let (val, train) = split(&train, cfg.val_ratio, derive_seed(cfg.seed, &[3]))?;
            (train, val)
        }
        None => (train.clone(), train),
    };
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("the train/validation split left an empty side; add data or set val_path"));
    }
    Ok(Splits { train, val })
}

fn label_set(task: TaskKind, sets: &[&[Prepared]]) -> LabelSet {
    match task {
        TaskKind::Generation => LabelSet::new(Vec::<String>::new()),
        _ => {
            let all: Vec<Prepared> = sets.iter().flat_map(|s| s.iter().cloned()).collect();
            LabelSet::from_prepared(&all)
        }
    }
}

fn encode(examples: &[Prepared], vocab: &Vocab, labels: &LabelSet, cfg: &TrainConfig) -> Result<Vec<EncodedExample>> {
    Ok(encode_all(examples, vocab, labels, cfg.limits())?.0)
}

fn dense_tfidf(tfidf: Option<&TfidfVocab>, examples: &[EncodedExample]) -> Vec<Vec<f64>> {
    match tfidf {
        Some(t) => examples.iter().map(|e| t.transform(&e.tokens).to_dense()).collect(),
        None => Vec::new(),
    }
}

fn stopwords(cfg: &TrainConfig) -> Result<Stopwords> {
    let mut s = Stopwords::english();
    if let Some(p) = &cfg.stopwords_path {
        s.extend_from_file(p)?;
    }
    Ok(s)
}

fn batching(cfg: &TrainConfig) -> Batching {
    Batching { batch_size: cfg.batch_size, grad_clip: cfg.grad_clip, seed: cfg.seed }
}

/// Everything a finished training run reports back.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub history: History,
    pub report: MetricsReport,
}

/// Supervised training of a task model. Writes the checkpoint, vocabulary,
/// optional tf-idf table, history, metrics and predictions.
pub fn run_train(cfg: &TrainConfig, out: &Path) -> Result<RunSummary> {
    prepare_dir(out)?;
    let task = cfg.task();
    let splits = load_splits(cfg, task)?;
    let vocab = match &cfg.init_from {
        Some(dir) => Vocab::load_dir(dir)?,
        None => Vocab::build(&vocab_corpus(&splits.train), cfg.min_freq)?,
    };
    let test = cfg.test_path.as_deref().map(|p| load_prepared(cfg, p, task)).transpose()?;
    let labels = label_set(task, &[&splits.train, &splits.val]);
    let train = encode(&splits.train, &vocab, &labels, cfg)?;
    let val = encode(&splits.val, &vocab, &labels, cfg)?;
    let test = test.map(|t| encode(&t, &vocab, &labels, cfg)).transpose()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("no example survived preprocessing"));
    }
    let tfidf = if cfg.use_tfidf && task == TaskKind::Classification {
        let docs: Vec<Vec<String>> = train.iter().map(|e| e.tokens.clone()).collect();
        Some(TfidfVocab::fit(&docs, stopwords(cfg)?, cfg.tfidf())?)
    } else {
        None
    };
    let meta = RunMeta {
        role: Role::Task,
        task: Some(task),
        encoder: cfg.encoder(),
        n_words: vocab.num_words(),
        n_chars: vocab.num_chars(),
        n_labels: labels.len(),
        tfidf_dim: tfidf.as_ref().map_or(0, TfidfVocab::dim),
        l_dec: cfg.l_dec,
        labels: labels.names().to_vec(),
        lowercase: cfg.lowercase,
    };
    let mut store = ParamStore::new();
    let model = TaskModel::build(&mut store, &meta.spec()?, &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0])))?;
    if let Some(dir) = &cfg.init_from {
        let n = transfer_load(&mut store, &Checkpoint::load(&dir.join(CHECKPOINT_FILE))?, cfg.transfer_mode)?;
        log::info!("initialized {n} encoder tensors from {}", dir.display());
    }
    let (train_tfidf, val_tfidf) = (dense_tfidf(tfidf.as_ref(), &train), dense_tfidf(tfidf.as_ref(), &val));
    let mut objective = Supervised {
        model: &model,
        train: &train,
        train_tfidf: &train_tfidf,
        val: &val,
        val_tfidf: &val_tfidf,
        batching: batching(cfg),
        target_accuracy: None,
        max_out: cfg.max_out,
    };
    let history = fit(&mut store, &mut objective, FitOptions::from(cfg))?;
    round_to_stored(&mut store);

    let config_text = cfg.render();
    let (eval_set, eval_name) = match &test {
        Some(t) => (t.as_slice(), "test"),
        None => (val.as_slice(), "validation"),
    };
    let eval_tfidf = dense_tfidf(tfidf.as_ref(), eval_set);
    let (mut report, preds) = evaluate(&store, &model, eval_set, &eval_tfidf, &labels, &vocab, cfg.max_out, &config_text)?;
    report.metadata.insert("split".into(), eval_name.into());
    report.metrics.insert("best_val_loss".into(), history.best_val_loss);

    save_checkpoint(out, &store, &meta)?;
    vocab.save_dir(out)?;
    if let Some(t) = &tfidf {
        t.save(&out.join(TFIDF_FILE))?;
    }
    write(&out.join(CONFIG_FILE), &config_text)?;
    write(&out.join(HISTORY_FILE), &history.to_json()?)?;
    write(&out.join(METRICS_FILE), &report.to_json()?)?;
    write(&out.join(PREDICTIONS_FILE), &predictions_jsonl(&preds)?)?;
    Ok(RunSummary { history, report })
}

fn model_dir<'a>(cfg: &'a TrainConfig, out: &'a Path) -> &'a Path {
    cfg.model_dir.as_deref().unwrap_or(out)
}

/// Scores a trained task model on `test_path` (or `val_path`).
pub fn run_evaluate(cfg: &TrainConfig, out: &Path) -> Result<MetricsReport> {
    prepare_dir(out)?;
    let run = LoadedRun::load(model_dir(cfg, out))?;
    let RunModel::Task(model) = &run.model else {
        return Err(Error::invalid("evaluate needs a task checkpoint, found a pretraining run"));
    };
    let task = cfg.task();
    if run.meta.task != Some(task) {
        return Err(Error::invalid(format!(
            "config asks for a {task:?} evaluation but the checkpoint holds a {:?} model",
            run.meta.task.expect("task role")
        )));
    }
    let path = match (&cfg.test_path, &cfg.val_path) {
        (Some(p), _) | (None, Some(p)) => p,
        _ => return Err(Error::invalid("config key `test_path` is required here")),
    };
    let mut eval_cfg = cfg.clone();
    eval_cfg.lowercase = run.meta.lowercase;
    eval_cfg.max_len = run.meta.encoder.max_len;
    eval_cfg.max_word_len = run.meta.encoder.max_word_len;
    let labels = LabelSet::new(run.meta.labels.clone());
    let data = encode(&load_prepared(&eval_cfg, path, task)?, &run.vocab, &labels, &eval_cfg)?;
    let tfidf = dense_tfidf(run.tfidf.as_ref(), &data);
    let (mut report, preds) = evaluate(&run.store, model, &data, &tfidf, &labels, &run.vocab, cfg.max_out, &cfg.render())?;
    report.metadata.insert("split".into(), path.display().to_string());
    write(&out.join(METRICS_FILE), &report.to_json()?)?;
    write(&out.join(PREDICTIONS_FILE), &predictions_jsonl(&preds)?)?;
    Ok(report)
}

fn corpus_lines(path: &Path, prep: &Preprocessor) -> Result<Vec<Vec<String>>> {
    Ok(read(path)?.lines().map(|l| prep.tokenize(l)).filter(|t| !t.is_empty()).collect())
}

/// Masked-token prediction fraction over fixed validation masks.
fn masked_accuracy(store: &ParamStore, model: &MlmModel, vocab: &Vocab, data: &[EncodedExample], seed: u64, mwl: usize) -> Result<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for (i, ex) in data.iter().enumerate() {
        let Ok((_, targets, plan)) = mask_tokens(ex.words(), vocab.num_words(), derive_seed(seed, &[i as u64])) else {
            continue;
        };
        if plan.positions.is_empty() {
            continue;
        }
        let rows = model.predict(store, &apply_mask(ex, &plan, vocab, mwl))?;
        for &p in &plan.positions {
            n += 1;
            hit += usize::from(argmax(&rows[p]) as i64 == targets[p]);
        }
    }
    Ok(if n == 0 { 0.0 } else { hit as f64 / n as f64 })
}

/// Masked language model pretraining on `corpus_path`.
pub fn run_pretrain_mlm(cfg: &TrainConfig, out: &Path) -> Result<RunSummary> {
    prepare_dir(out)?;
    let prep = Preprocessor { lowercase: cfg.lowercase };
    let corpus_path = cfg.require("corpus_path", &cfg.corpus_path)?;
    let lines = corpus_lines(corpus_path, &prep)?;
    if lines.is_empty() {
        return Err(Error::invalid(format!("{}: the corpus is empty", corpus_path.display())));
    }
    let vocab = Vocab::build(&lines, cfg.min_freq)?;
    let examples: Vec<EncodedExample> = lines
        .iter()
        .enumerate()
        .filter_map(|(i, t)| encode_tokens(&(i + 1).to_string(), t, &vocab, cfg.limits()))
        .collect();
    let (val, train) = if cfg.val_ratio > 0.0 && examples.len() > 1 {
        split(&examples, cfg.val_ratio, derive_seed(cfg.seed, &[3]))?
    } else {
        (examples.clone(), examples)
    };
    let (train, val) = if val.is_empty() { (train.clone(), train) } else { (train, val) };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0]));
    let enc = HitEncoder::new(&mut store, cfg.encoder(), vocab.num_words(), vocab.num_chars(), &mut rng)?;
    let model = MlmModel::new(&mut store, enc, &mut rng)?;
    let mut objective =
        MaskedLm { model: &model, vocab: &vocab, train: &train, val: &val, batching: batching(cfg), max_word_len: cfg.max_word_len };
    let history = fit(&mut store, &mut objective, FitOptions::from(cfg))?;
    round_to_stored(&mut store);
    let config_text = cfg.render();
    let mut report = MetricsReport::new("mlm", &config_text);
    report.metrics.insert("best_val_loss".into(), history.best_val_loss);
    let acc = masked_accuracy(&store, &model, &vocab, &val, derive_seed(cfg.seed, &[4]), cfg.max_word_len)?;
    report.metrics.insert("masked_accuracy".into(), acc);
    let meta = RunMeta {
        role: Role::Mlm,
        task: None,
        encoder: cfg.encoder(),
        n_words: vocab.num_words(),
        n_chars: vocab.num_chars(),
        n_labels: 0,
        tfidf_dim: 0,
        l_dec: cfg.l_dec,
        labels: Vec::new(),
        lowercase: cfg.lowercase,
    };
    save_checkpoint(out, &store, &meta)?;
    vocab.save_dir(out)?;
    write(&out.join(CONFIG_FILE), &config_text)?;
    write(&out.join(HISTORY_FILE), &history.to_json()?)?;
    write(&out.join(METRICS_FILE), &report.to_json()?)?;
    Ok(RunSummary { history, report })
}

/// Tokens of a label name used as its phrase: underscores read as spaces.
pub fn label_phrase(name: &str, prep: &Preprocessor) -> Vec<String> {
    prep.tokenize(&name.replace('_', " "))
}

fn gold_labels(examples: &[EncodedExample]) -> Result<Vec<usize>> {
    examples
        .iter()
        .map(|e| match e.target {
            Target::Class(c) => Ok(c),
            _ => Err(Error::invalid(format!("example `{}` has no class label", e.id))),
        })
        .collect()
}

fn phrases(labels: &LabelSet, vocab: &Vocab, prep: &Preprocessor, cfg: &TrainConfig) -> Result<Vec<EncodedExample>> {
    labels
        .names()
        .iter()
        .map(|n| {
            encode_tokens(n, &label_phrase(n, prep), vocab, cfg.limits())
                .ok_or_else(|| Error::invalid(format!("label `{n}` has no usable words")))
        })
        .collect()
}

/// Zero-shot scoring of `data` against its own label inventory.
pub fn zero_shot_accuracy(
    store: &ParamStore,
    encoder: &HitEncoder,
    data: &[EncodedExample],
    phrases: &[EncodedExample],
) -> Result<(f64, Vec<usize>)> {
    let gold = gold_labels(data)?;
    let pred = data.iter().map(|e| zsl_predict(store, encoder, e, phrases)).collect::<Result<Vec<_>>>()?;
    Ok((metrics::accuracy(&gold, &pred), pred))
}

/// Entailment training on a classification dataset; the label names are
/// the phrases. Scores zero-shot accuracy on `test_path` when given.
pub fn run_pretrain_zsl(cfg: &TrainConfig, out: &Path) -> Result<RunSummary> {
    prepare_dir(out)?;
    let prep = Preprocessor { lowercase: cfg.lowercase };
    let splits = load_splits(cfg, TaskKind::Classification)?;
    let test = cfg.test_path.as_deref().map(|p| load_prepared(cfg, p, TaskKind::Classification)).transpose()?;
    let labels = label_set(TaskKind::Classification, &[&splits.train, &splits.val]);
    let test_labels = test.as_ref().map(|t| LabelSet::from_prepared(t));
    let mut corpus = vocab_corpus(&splits.train);
    for n in labels.names().iter().chain(test_labels.iter().flat_map(|l| l.names())) {
        corpus.push(label_phrase(n, &prep));
    }
    let vocab = Vocab::build(&corpus, cfg.min_freq)?;
    let train = encode(&splits.train, &vocab, &labels, cfg)?;
    let val = encode(&splits.val, &vocab, &labels, cfg)?;
    let label_examples = phrases(&labels, &vocab, &prep, cfg)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0]));
    let enc = HitEncoder::new(&mut store, cfg.encoder(), vocab.num_words(), vocab.num_chars(), &mut rng)?;
    let (train_gold, val_gold) = (gold_labels(&train)?, gold_labels(&val)?);
    let mut objective = ZeroShot::new(
        &enc,
        &label_examples,
        std::iter::once(0..label_examples.len()).collect(),
        &train,
        &train_gold,
        &val,
        &val_gold,
        cfg.neg_per_pos,
        cfg.tau,
        batching(cfg),
    )?;
    let history = fit(&mut store, &mut objective, FitOptions::from(cfg))?;
    round_to_stored(&mut store);
    let config_text = cfg.render();
    let mut report = MetricsReport::new("zsl", &config_text);
    report.metrics.insert("best_val_loss".into(), history.best_val_loss);
    let (val_acc, _) = zero_shot_accuracy(&store, &enc, &val, &label_examples)?;
    report.metrics.insert("val_accuracy".into(), val_acc);
    let mut preds = Vec::new();
    if let (Some(test), Some(tl)) = (&test, &test_labels) {
        let data = encode(test, &vocab, tl, cfg)?;
        let ph = phrases(tl, &vocab, &prep, cfg)?;
        let (acc, pred) = zero_shot_accuracy(&store, &enc, &data, &ph)?;
        report.metrics.insert("zero_shot_accuracy".into(), acc);
        for (e, p) in data.iter().zip(pred) {
            preds.push(serde_json::json!({ "id": e.id, "label": tl.name(p) }).to_string() + "\n");
        }
    }
    let meta = RunMeta {
        role: Role::Zsl,
        task: None,
        encoder: cfg.encoder(),
        n_words: vocab.num_words(),
        n_chars: vocab.num_chars(),
        n_labels: labels.len(),
        tfidf_dim: 0,
        l_dec: cfg.l_dec,
        labels: labels.names().to_vec(),
        lowercase: cfg.lowercase,
    };
    save_checkpoint(out, &store, &meta)?;
    vocab.save_dir(out)?;
    write(&out.join(CONFIG_FILE), &config_text)?;
    write(&out.join(HISTORY_FILE), &history.to_json()?)?;
    write(&out.join(METRICS_FILE), &report.to_json()?)?;
    if !preds.is_empty() {
        write(&out.join(PREDICTIONS_FILE), &preds.concat())?;
    }
    Ok(RunSummary { history, report })
}

#[derive(Serialize)]
struct EmbeddingLine {
    line: usize,
    /// Nothing survived preprocessing; the vector is all zeros.
    empty: bool,
    vector: Vec<f64>,
}

/// One embedding per line of `input_path`. Returns the line count.
pub fn run_embed(cfg: &TrainConfig, out: &Path) -> Result<usize> {
    prepare_dir(out)?;
    let run = LoadedRun::load(model_dir(cfg, out))?;
    let input = read(cfg.require("input_path", &cfg.input_path)?)?;
    let d = run.meta.encoder.d_model;
    let mut body = String::new();
    let mut n = 0;
    for (i, line) in input.lines().enumerate() {
        let v = run.embed(line)?;
        let rec = EmbeddingLine { line: i + 1, empty: v.is_none(), vector: v.unwrap_or_else(|| vec![0.0; d]) };
        body.push_str(&serde_json::to_string(&rec)?);
        body.push('\n');
        n += 1;
    }
    write(&out.join(EMBEDDINGS_FILE), &body)?;
    Ok(n)
}

/// Greedy decoding of every line of `input_path`, one output line each.
pub fn run_generate(cfg: &TrainConfig, out: &Path) -> Result<Vec<String>> {
    prepare_dir(out)?;
    let run = LoadedRun::load(model_dir(cfg, out))?;
    let RunModel::Task(TaskModel::Generator(model)) = &run.model else {
        return Err(Error::invalid("generate needs a generation checkpoint"));
    };
    let prep = run.preprocessor();
    let lim = limits(&run.meta.encoder);
    let input = read(cfg.require("input_path", &cfg.input_path)?)?;
    let mut lines = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let mut toks = prep.tokenize(line);
        toks.truncate(lim.max_len.saturating_sub(2));
        if toks.is_empty() {
            lines.push(String::new());
            continue;
        }
        let mut src = vec!["[CLS]".to_string()];
        src.extend(toks);
        src.push("[EOS]".to_string());
        let ex = encode_tokens(&(i + 1).to_string(), &src, &run.vocab, lim).expect("non-empty");
        let ids = model.greedy_decode(&run.store, &ex, cfg.max_out)?;
        lines.push(ids.iter().map(|&w| run.vocab.word(w)).collect::<Vec<_>>().join(" "));
    }
    let mut body = lines.join("\n");
    if !lines.is_empty() {
        body.push('\n');
    }
    write(&out.join(GENERATIONS_FILE), &body)?;
    Ok(lines)
}

#[derive(Clone, Debug, Serialize)]
pub struct Analysis {
    pub points: usize,
    pub k: usize,
    pub kmeans: metrics::ClusterQuality,
    pub final_inertia: f64,
    /// Quality of the gold labeling in the same space, when it has at
    /// least two classes.
    pub gold: Option<metrics::ClusterQuality>,
    pub assignments: Vec<usize>,
}

/// k-means over the sentence embeddings of a classification dataset
/// (`input_path`), with silhouette and Davies–Bouldin for the clustering
/// and for the gold labels.
pub fn run_analyze(cfg: &TrainConfig, out: &Path) -> Result<Analysis> {
    prepare_dir(out)?;
    let run = LoadedRun::load(model_dir(cfg, out))?;
    let path = cfg.require("input_path", &cfg.input_path)?;
    let records = load_dataset(path, DatasetKind::Classification)?;
    let prepared = prepare_all(&records, TaskKind::Classification, &run.preprocessor(), limits(&run.meta.encoder))?;
    let labels = LabelSet::from_prepared(&prepared);
    let (mut points, mut gold) = (Vec::new(), Vec::new());
    for p in &prepared {
        let Some(ex) = encode_tokens(&p.id, &p.tokens, &run.vocab, limits(&run.meta.encoder)) else {
            continue;
        };
        let mut g = Graph::inference(&run.store);
        let e = run.encoder().sentence_embed(&mut g, &ex, None)?;
        points.push(g.value(e).data().to_vec());
        if let PreparedTarget::Label(l) = &p.target {
            gold.push(labels.index(l).expect("label set built from these examples"));
        }
    }
    let k = cfg.clusters.unwrap_or(labels.len().max(2));
    let km = metrics::kmeans(&points, k, cfg.seed, cfg.kmeans_iters)?;
    let analysis = Analysis {
        points: points.len(),
        k,
        kmeans: metrics::cluster_quality(&points, &km.assignments)?,
        final_inertia: km.inertia.last().copied().unwrap_or(0.0),
        gold: if labels.len() >= 2 { Some(metrics::cluster_quality(&points, &gold)?) } else { None },
        assignments: km.assignments,
    };
    write(&out.join(ANALYSIS_FILE), &(serde_json::to_string_pretty(&analysis)? + "\n"))?;
    Ok(analysis)
}

/// The output directory a subcommand writes by default.
pub fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}
