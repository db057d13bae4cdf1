mod support;

use std::path::Path;

use hitkit::attention::{OpaCombine, OpaScore};
use hitkit::data::{LabelSet, Target, TaskKind};
use hitkit::encoders::HitEncoder;
use hitkit::tasks::Classifier;
use hitkit::tasks::TaskModel;
use hitkit::tensor::{Adam, ParamStore, Tensor};
use hitkit::train::eval::evaluate;
use hitkit::train::objectives::{Batching, Supervised};
use hitkit::train::*;
use hitkit::Error;
use proptest::prelude::*;
use support::*;

#[test]
fn defaults_follow_the_published_schedule() {
    let c = TrainConfig::default();
    assert_eq!((c.lr, c.beta1, c.beta2), (0.001, 0.9, 0.999));
    assert_eq!((c.epochs, c.batch_size, c.dropout), (500, 32, 0.2));
    assert_eq!((c.plateau_patience, c.plateau_factor, c.early_stop_patience), (20, 0.7, 100));
    assert_eq!((c.d_model, c.l_c, c.l_w, c.n_heads), (128, 1, 2, 4));
    assert_eq!((c.opa_score, c.opa_combine), (OpaScore::Tanh, OpaCombine::TrueOuterProjected));
    assert_eq!((c.max_len, c.max_word_len, c.grad_clip), (40, 20, 5.0));
    // The feed-forward width tracks d_model unless set.
    assert_eq!(c.d_ff(), 512);
    let small = TrainConfig::parse(Path::new("c.cfg"), "d_model = 32
").unwrap();
    assert_eq!(small.d_ff(), 128);
    let set = TrainConfig::parse(Path::new("c.cfg"), "d_model = 32
d_ff = 48
").unwrap();
    assert_eq!(set.d_ff(), 48);
}

#[test]
fn config_keys_parse_and_paths_resolve() {
    let text = "# run\nlr = 0.01\nepochs=3 # short\n\nopa_score = softmax\ntask = labeling\ntrain_path = data/t.jsonl\ntest_path = /abs/x.jsonl\ntfidf_max_df = 0.5f\n";
    let c = TrainConfig::parse(Path::new("/cfg/run.cfg"), text).unwrap();
    assert_eq!(c.lr, 0.01);
    assert_eq!(c.epochs, 3);
    assert_eq!(c.opa_score, OpaScore::Softmax);
    assert_eq!(c.task(), TaskKind::Labeling);
    assert_eq!(c.train_path.as_deref(), Some(Path::new("/cfg/data/t.jsonl")));
    assert_eq!(c.test_path.as_deref(), Some(Path::new("/abs/x.jsonl")));
    let again = TrainConfig::parse(Path::new("/elsewhere/r.cfg"), &c.render()).unwrap();
    assert_eq!(again, c);
}

#[test]
fn bad_config_lines_report_their_position() {
    for (text, line, needle) in [
        ("lr = 0.1\nlearning_rate = 3\n", 2, "unknown key `learning_rate`"),
        ("epochs = 2\nepochs = 3\n", 2, "twice"),
        ("seed\n", 1, "key = value"),
        ("\n\nbatch_size = many\n", 3, "batch_size"),
    ] {
        match TrainConfig::parse(Path::new("c.cfg"), text) {
            Err(Error::Parse { line: l, msg, .. }) => {
                assert_eq!(l, line, "{text}");
                assert!(msg.contains(needle), "{msg}");
            }
            other => panic!("{text}: {other:?}"),
        }
    }
    assert!(TrainConfig::parse(Path::new("c.cfg"), "plateau_factor = 1.0\n").is_err());
    assert!(TrainConfig::parse(Path::new("c.cfg"), "d_model = 10\nn_heads = 4\n").is_err());
}

#[test]
fn seed_precedence_is_config_env_cli() {
    let mut c = TrainConfig::parse(Path::new("c"), "seed = 5\n").unwrap();
    c.resolve_seed(None, None).unwrap();
    assert_eq!(c.seed, 5);
    c.resolve_seed(Some("11"), None).unwrap();
    assert_eq!(c.seed, 11);
    c.resolve_seed(Some("11"), Some(12)).unwrap();
    assert_eq!(c.seed, 12);
    assert!(c.resolve_seed(Some("abc"), None).is_err());
}

#[test]
fn two_plateau_triggers_leave_lr_at_0_00049() {
    let mut s = Schedule::new(0.001, 0.7, 20, 100);
    s.step(0, 1.0);
    let mut reductions = 0;
    for e in 1..=40 {
        reductions += usize::from(s.step(e, 1.0).reduced);
    }
    assert_eq!(reductions, 2);
    assert!((s.lr - 0.00049).abs() < 1e-15);
}

#[test]
fn early_stop_fires_exactly_patience_after_best() {
    let mut s = Schedule::new(0.001, 0.7, 20, 100);
    let losses = |e: usize| if e <= 7 { 10.0 - e as f64 } else { 5.0 };
    let stop = (0..1000).find(|&e| s.step(e, losses(e)).stop).unwrap();
    assert_eq!(s.best_epoch, Some(7));
    assert_eq!(stop, 107);
}

proptest! {
    #[test]
    fn lr_never_increases(losses in prop::collection::vec(0.0f64..10.0, 1..300)) {
        let mut s = Schedule::new(0.001, 0.7, 3, 1000);
        let mut last = s.lr;
        for (e, l) in losses.iter().enumerate() {
            let st = s.step(e, *l);
            prop_assert!(st.lr <= last);
            last = st.lr;
        }
        let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(s.best, min);
    }
}

/// Val loss follows a script; training nudges one parameter so restores
/// are observable.
struct Scripted {
    val: Vec<f64>,
    epoch: usize,
}

impl Objective for Scripted {
    fn train_epoch(&mut self, store: &mut ParamStore, _opt: &Adam, epoch: usize) -> hitkit::Result<f64> {
        self.epoch = epoch;
        let id = store.id("w").unwrap();
        store.set_value(id, Tensor::vector(vec![epoch as f64]))?;
        Ok(1.0)
    }
    fn val_loss(&mut self, _store: &ParamStore) -> hitkit::Result<f64> {
        Ok(self.val[self.epoch.min(self.val.len() - 1)])
    }
}

fn opts(epochs: usize) -> FitOptions {
    FitOptions::from(&TrainConfig { epochs, ..TrainConfig::default() })
}

#[test]
fn fit_restores_best_weights_and_records_history() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::vector(vec![0.0])).unwrap();
    let mut obj = Scripted { val: vec![3.0, 2.0, 1.5, 1.7, 1.6], epoch: 0 };
    let h = fit(&mut store, &mut obj, opts(10)).unwrap();
    assert_eq!(h.epochs.len(), 10);
    assert_eq!(h.stop_reason, StopReason::EpochCap);
    assert_eq!(h.best_epoch, 2);
    let min = h.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(h.best_val_loss, min);
    assert_eq!(store.value(store.id("w").unwrap()).data(), &[2.0]);
}

#[test]
fn nan_loss_names_the_epoch() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::vector(vec![0.0])).unwrap();
    let mut obj = Scripted { val: vec![1.0, 0.5, 0.4, f64::NAN], epoch: 0 };
    assert!(matches!(fit(&mut store, &mut obj, opts(10)), Err(Error::Diverged { epoch: 3 })));
}

#[test]
fn derived_seeds_separate_streams() {
    assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
    assert_ne!(derive_seed(1, &[0]), derive_seed(2, &[0]));
    assert_eq!(derive_seed(9, &[4, 4]), derive_seed(9, &[4, 4]));
}

fn toy() -> (ParamStore, TaskModel, Vec<hitkit::data::EncodedExample>) {
    let docs = ["good film", "bad film", "good acting", "bad plot", "great", "awful"];
    let vocab = toy_vocab(&docs);
    let mut store = ParamStore::new();
    let enc = HitEncoder::new(&mut store, tiny_encoder_cfg(), vocab.num_words(), vocab.num_chars(), &mut rng(1)).unwrap();
    let clf = Classifier::new(&mut store, enc, 2, 0, &mut rng(2)).unwrap();
    let data = docs
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let mut e = example(&vocab, d);
            e.target = Target::Class(i % 2);
            e
        })
        .collect();
    (store, TaskModel::Classifier(clf), data)
}

#[test]
fn supervised_runs_replay_exactly() {
    let run = || {
        let (mut store, model, data) = toy();
        let mut obj = Supervised {
            model: &model,
            train: &data,
            train_tfidf: &[],
            val: &data,
            val_tfidf: &[],
            batching: Batching { batch_size: 4, grad_clip: 5.0, seed: 3 },
            target_accuracy: None,
            max_out: 5,
        };
        let h = fit(&mut store, &mut obj, opts(8)).unwrap();
        (h, store.snapshot())
    };
    let (h1, s1) = run();
    let (h2, s2) = run();
    assert_eq!(h1, h2);
    for (a, b) in s1.iter().zip(&s2) {
        assert_eq!(a.data(), b.data());
    }
    assert!(h1.epochs.last().unwrap().train_loss < h1.epochs[0].train_loss);
}

#[test]
fn confusion_rows_count_gold_labels() {
    let (store, model, data) = toy();
    let vocab = toy_vocab(&["good film"]);
    let labels = LabelSet::new(["neg", "pos"]);
    let (report, preds) = evaluate(&store, &model, &data, &[], &labels, &vocab, 5, "x").unwrap();
    let cm = report.confusion.unwrap();
    assert_eq!(cm.row_sums(), vec![3, 3]);
    assert_eq!(cm.total(), 6);
    assert_eq!(preds.len(), 6);
    let again = evaluate(&store, &model, &data, &[], &labels, &vocab, 5, "x").unwrap();
    assert_eq!(again.0.metrics, report.metrics);
}
