mod support;

use std::collections::BTreeSet;

use hitkit::data::vocab::{CLS, EOS, MASK, NUM_SPECIALS, PAD};
use hitkit::encoders::HitEncoder;
use hitkit::pretrain::*;
use hitkit::tasks::{Classifier, IGNORE_INDEX};
use hitkit::tensor::{Adam, Checkpoint, Graph, ParamStore};
use hitkit::Error;
use proptest::prelude::*;
use support::*;

#[test]
fn selection_and_action_rates() {
    let tokens: Vec<usize> = (0..100_000).map(|i| NUM_SPECIALS + i % 50).collect();
    let (input, targets, plan) = mask_tokens(&tokens, 60, 7).unwrap();
    let n = plan.positions.len() as f64;
    let rate = n / tokens.len() as f64;
    assert!((rate - 0.15).abs() <= 0.01, "selection rate {rate}");
    let count = |f: fn(&MaskAction) -> bool| plan.actions.iter().filter(|a| f(a)).count() as f64 / n;
    let m = count(|a| matches!(a, MaskAction::Mask));
    let r = count(|a| matches!(a, MaskAction::Random(_)));
    let k = count(|a| matches!(a, MaskAction::Keep));
    assert!((m - 0.8).abs() <= 0.02 && (r - 0.1).abs() <= 0.02 && (k - 0.1).abs() <= 0.02, "{m} {r} {k}");
    assert_eq!(targets.iter().filter(|&&t| t != IGNORE_INDEX).count(), plan.positions.len());
    for a in &plan.actions {
        if let MaskAction::Random(w) = a {
            assert!((NUM_SPECIALS..60).contains(w));
        }
    }
    assert_eq!(input.iter().filter(|&&t| t == MASK).count(), (m * n).round() as usize);
}

#[test]
fn all_special_sequence_is_an_error() {
    assert!(mask_tokens(&[CLS, PAD, EOS], 50, 0).is_err());
    assert!(mask_tokens(&[], 50, 0).is_err());
}

proptest! {
    #[test]
    fn masking_invariants(tokens in prop::collection::vec(0usize..30, 1..60), seed in any::<u64>()) {
        prop_assume!(tokens.iter().any(|&t| t >= NUM_SPECIALS));
        let (input, targets, plan) = mask_tokens(&tokens, 30, seed).unwrap();
        prop_assert_eq!(input.len(), tokens.len());
        prop_assert_eq!(targets.len(), tokens.len());
        for &p in &plan.positions {
            prop_assert!(tokens[p] >= NUM_SPECIALS);
            prop_assert_eq!(targets[p], tokens[p] as i64);
        }
        for (i, &t) in tokens.iter().enumerate() {
            if !plan.positions.contains(&i) {
                prop_assert_eq!(input[i], t);
                prop_assert_eq!(targets[i], IGNORE_INDEX);
            }
        }
        let again = mask_tokens(&tokens, 30, seed).unwrap();
        prop_assert_eq!(again, (input, targets, plan));
    }
}

#[test]
fn apply_mask_rewrites_words_and_chars() {
    let vocab = toy_vocab(&["alpha beta gamma delta"]);
    let ex = example(&vocab, "alpha beta gamma delta");
    let plan = MaskPlan {
        positions: vec![0, 1, 2],
        actions: vec![MaskAction::Mask, MaskAction::Random(vocab.word_id("delta")), MaskAction::Keep],
        seed: 0,
    };
    let m = apply_mask(&ex, &plan, &vocab, 20);
    assert_eq!(m.words()[0], MASK);
    assert_eq!(m.chars(0), &[MASK]);
    assert_eq!(m.words()[1], vocab.word_id("delta"));
    assert_eq!(m.chars(1), ex.chars(3));
    assert_eq!(m.words()[2..], ex.words()[2..]);
    assert_eq!(m.chars(2), ex.chars(2));
}

#[test]
fn pair_counts_and_polarity() {
    let gold = [0, 1, 2, 1];
    let pairs = zsl_build_pairs(&gold, 3, &mut rng(1), 2).unwrap();
    assert_eq!(pairs.len(), 12);
    for (i, &g) in gold.iter().enumerate() {
        let mine: Vec<_> = pairs.iter().filter(|p| p.example == i).collect();
        assert_eq!(mine.iter().filter(|p| p.entail).count(), 1);
        assert!(mine.iter().all(|p| p.entail == (p.label == g)));
    }
}

#[test]
fn two_labels_force_the_other_as_negative() {
    let pairs = zsl_build_pairs(&[0, 1], 2, &mut rng(2), 3).unwrap();
    for p in pairs.iter().filter(|p| !p.entail) {
        assert_eq!(p.label, 1 - [0, 1][p.example]);
    }
    assert!(matches!(zsl_build_pairs(&[0], 1, &mut rng(0), 1), Err(Error::Invalid(_))));
}

#[test]
fn task_negatives_stay_inside_the_gold_task() {
    let gold = [0, 1, 2, 3, 4, 2];
    let tasks = [0..2, 2..5];
    let pairs = zsl_build_task_pairs(&gold, &tasks, &mut rng(4), 4).unwrap();
    assert_eq!(pairs.len(), gold.len() * 5);
    for p in pairs.iter().filter(|p| !p.entail) {
        let g = gold[p.example];
        let t = tasks.iter().find(|t| t.contains(&g)).unwrap();
        assert!(t.contains(&p.label) && p.label != g);
    }
    assert!(zsl_build_task_pairs(&[5], &tasks, &mut rng(0), 1).is_err());
    assert!(zsl_build_task_pairs(&[0], std::slice::from_ref(&(0..1)), &mut rng(0), 1).is_err());
}

#[test]
fn negatives_are_uniform_over_wrong_labels() {
    let gold = vec![2usize; 10_000];
    let pairs = zsl_build_pairs(&gold, 5, &mut rng(3), 1).unwrap();
    let mut counts = [0usize; 5];
    for p in pairs.iter().filter(|p| !p.entail) {
        counts[p.label] += 1;
    }
    assert_eq!(counts[2], 0);
    for l in [0, 1, 3, 4] {
        let f = counts[l] as f64 / 10_000.0;
        assert!((f - 0.25).abs() < 0.03, "{counts:?}");
    }
}

fn encoder(n_words: usize, n_chars: usize, seed: u64) -> (ParamStore, HitEncoder) {
    let mut store = ParamStore::new();
    let enc = HitEncoder::new(&mut store, tiny_encoder_cfg(), n_words, n_chars, &mut rng(seed)).unwrap();
    (store, enc)
}

#[test]
fn score_is_a_symmetric_cosine() {
    let vocab = toy_vocab(&["the film was great", "sports news today"]);
    let (store, enc) = encoder(vocab.num_words(), vocab.num_chars(), 4);
    let a = example(&vocab, "the film was great");
    let b = example(&vocab, "sports news today");
    let same = zsl_score(&store, &enc, &a, &a).unwrap();
    assert!((same - 1.0).abs() < 1e-6);
    let ab = zsl_score(&store, &enc, &a, &b).unwrap();
    let ba = zsl_score(&store, &enc, &b, &a).unwrap();
    assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&ab));
    assert!((ab - ba).abs() < 1e-12);
}

#[test]
fn loss_matches_scalar_bce() {
    let vocab = toy_vocab(&["good movie", "sports"]);
    let (store, enc) = encoder(vocab.num_words(), vocab.num_chars(), 5);
    let a = example(&vocab, "good movie");
    let b = example(&vocab, "sports");
    let s = zsl_score(&store, &enc, &a, &b).unwrap();
    let sig = 1.0 / (1.0 + (-s / DEFAULT_TAU).exp());
    for (entail, want) in [(true, -sig.ln()), (false, -(1.0 - sig).ln())] {
        let mut g = Graph::inference(&store);
        let l = zsl_loss(&mut g, &enc, &a, &b, entail, DEFAULT_TAU).unwrap();
        assert!((g.value(l).data()[0] - want).abs() < 1e-10);
    }
}

fn classifier(n_words: usize, n_chars: usize, seed: u64) -> (ParamStore, Classifier) {
    let mut store = ParamStore::new();
    let enc = HitEncoder::new(&mut store, tiny_encoder_cfg(), n_words, n_chars, &mut rng(seed)).unwrap();
    let c = Classifier::new(&mut store, enc, 3, 0, &mut rng(seed + 1)).unwrap();
    (store, c)
}

#[test]
fn frozen_transfer_keeps_encoder_bits() {
    let vocab = toy_vocab(&["a b c d"]);
    let (pre, _) = encoder(vocab.num_words(), vocab.num_chars(), 10);
    let ckpt = Checkpoint::from_store(&pre, serde_json::json!({}));
    let (mut store, clf) = classifier(vocab.num_words(), vocab.num_chars(), 20);
    let n = transfer_load(&mut store, &ckpt, TransferMode::Frozen).unwrap();
    assert_eq!(n, pre.len());
    let enc_before: Vec<_> = store.iter().filter(|(_, p)| is_encoder_param(&p.name)).map(|(_, p)| p.value.clone()).collect();
    let head_before = store.value(store.id("head.out.w").unwrap()).clone();
    let mut ex = example(&vocab, "a b c");
    ex.target = hitkit::data::Target::Class(1);
    for step in 0..3 {
        let mut g = Graph::training(&store, step);
        let loss = clf.loss(&mut g, &ex, None).unwrap();
        let grads = g.backward(loss).unwrap();
        for (id, _) in grads.param_grads() {
            assert!(!is_encoder_param(&store.get(id).name), "encoder received a gradient");
        }
        store.accumulate(&grads);
        Adam::default().step(&mut store).unwrap();
    }
    let enc_after: Vec<_> = store.iter().filter(|(_, p)| is_encoder_param(&p.name)).map(|(_, p)| p.value.clone()).collect();
    for (a, b) in enc_before.iter().zip(&enc_after) {
        assert_eq!(a.data(), b.data());
    }
    assert_ne!(store.value(store.id("head.out.w").unwrap()).data(), head_before.data());
}

#[test]
fn finetune_transfer_updates_encoder() {
    let vocab = toy_vocab(&["a b c d"]);
    let (pre, _) = encoder(vocab.num_words(), vocab.num_chars(), 10);
    let ckpt = Checkpoint::from_store(&pre, serde_json::json!({}));
    let (mut store, clf) = classifier(vocab.num_words(), vocab.num_chars(), 20);
    transfer_load(&mut store, &ckpt, TransferMode::Finetune).unwrap();
    let id = store.id("word_hit.embedding").unwrap();
    let stored: Vec<f64> = pre.value(pre.id("word_hit.embedding").unwrap()).data().iter().map(|&x| x as f32 as f64).collect();
    assert_eq!(store.value(id).data(), stored.as_slice());
    let before = store.value(id).clone();
    let mut ex = example(&vocab, "a b c");
    ex.target = hitkit::data::Target::Class(2);
    let mut g = Graph::training(&store, 0);
    let loss = clf.loss(&mut g, &ex, None).unwrap();
    let grads = g.backward(loss).unwrap();
    store.accumulate(&grads);
    Adam::default().step(&mut store).unwrap();
    assert_ne!(store.value(id).data(), before.data());
}

#[test]
fn transfer_round_trip_is_bit_identical() {
    let vocab = toy_vocab(&["a b c d"]);
    let (pre, _) = encoder(vocab.num_words(), vocab.num_chars(), 10);
    let bytes = Checkpoint::from_store(&pre, serde_json::json!({})).to_bytes();
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    let (mut fresh, _) = encoder(vocab.num_words(), vocab.num_chars(), 99);
    transfer_load(&mut fresh, &ckpt, TransferMode::Finetune).unwrap();
    assert_eq!(Checkpoint::from_store(&fresh, serde_json::json!({})).to_bytes(), bytes);
}

#[test]
fn mismatched_encoder_is_refused_with_names() {
    let (pre, _) = encoder(12, 10, 10);
    let ckpt = Checkpoint::from_store(&pre, serde_json::json!({}));
    let (mut store, _) = classifier(15, 10, 20);
    let before = store.snapshot();
    let err = transfer_load(&mut store, &ckpt, TransferMode::Frozen).unwrap_err().to_string();
    assert!(err.contains("word_hit.embedding"), "{err}");
    assert!(!err.contains("char_hit.embedding"), "{err}");
    let names: BTreeSet<_> = store.iter().filter(|(_, p)| !p.trainable).map(|(_, p)| p.name.clone()).collect();
    assert!(names.is_empty());
    for (a, b) in before.iter().zip(store.snapshot()) {
        assert_eq!(a.data(), b.data());
    }
}
