use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_hitkit");

fn hitkit(args: &[&str], dir: &Path) -> Output {
    Command::new(BIN).args(args).current_dir(dir).env_remove("HITKIT_SEED").output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

const SMALL: &str = "epochs = 4\nd_model = 8\nn_heads = 2\nd_ff = 16\nl_w = 1\nbatch_size = 8\nval_ratio = 0\n";

fn classification_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let mut data = String::new();
    for (i, t) in ["bahut accha", "bekar film", "maza aaya", "boring yaar", "super hit", "ekdum flop"].iter().enumerate() {
        let label = if i % 2 == 0 { "positive" } else { "negative" };
        data.push_str(&format!("{{\"text\": \"{t}\", \"label\": \"{label}\"}}\n"));
    }
    fs::write(dir.path().join("train.jsonl"), &data).unwrap();
    fs::write(dir.path().join("c.cfg"), format!("{SMALL}train_path = train.jsonl\nuse_tfidf = true\n")).unwrap();
    dir
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = hitkit(&["train", "--config", "no/such.cfg"], dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("no/such.cfg"), "{err}");
    assert_eq!(err.trim().lines().count(), 1);
}

#[test]
fn unknown_subcommand_or_flag_prints_usage() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["fly"][..], &["train", "--config", "c", "--bogus"][..], &["embed"][..]] {
        let out = hitkit(args, dir.path());
        assert!(!out.status.success());
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"), "{args:?}");
    }
}

#[test]
fn every_subcommand_takes_the_common_flags() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["train", "evaluate", "pretrain-mlm", "pretrain-zsl", "embed", "generate", "analyze-embeddings"] {
        let out = hitkit(&[sub, "--help"], dir.path());
        ok(&out);
        let help = String::from_utf8_lossy(&out.stdout);
        for flag in ["--config", "--seed", "--out-dir"] {
            assert!(help.contains(flag), "{sub} lacks {flag}");
        }
    }
}

#[test]
fn train_evaluate_embed_analyze() {
    let dir = classification_dir();
    let d = dir.path();
    ok(&hitkit(&["train", "--config", "c.cfg", "--out-dir", "run"], d));
    for f in ["checkpoint", "history.json", "metrics.json", "predictions.jsonl", "tfidf.tsv"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run/metrics.json")).unwrap()).unwrap();
    let acc = metrics["metrics"]["accuracy"].as_f64().unwrap();

    fs::write(d.join("e.cfg"), "test_path = train.jsonl\nmodel_dir = run\n").unwrap();
    ok(&hitkit(&["evaluate", "--config", "e.cfg", "--out-dir", "eval"], d));
    let m2: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("eval/metrics.json")).unwrap()).unwrap();
    assert_eq!(m2["metrics"]["accuracy"].as_f64().unwrap(), acc);
    assert_eq!(
        fs::read_to_string(d.join("eval/predictions.jsonl")).unwrap(),
        fs::read_to_string(d.join("run/predictions.jsonl")).unwrap()
    );

    fs::write(d.join("bad.cfg"), "task = labeling\ntest_path = train.jsonl\nmodel_dir = run\n").unwrap();
    let out = hitkit(&["evaluate", "--config", "bad.cfg", "--out-dir", "eval2"], d);
    assert!(!out.status.success());

    fs::write(d.join("lines.txt"), "bahut accha\n\n!!!\nflop film\nnaya shabd\n").unwrap();
    fs::write(d.join("emb.cfg"), "input_path = lines.txt\nmodel_dir = run\n").unwrap();
    ok(&hitkit(&["embed", "--config", "emb.cfg", "--out-dir", "emb"], d));
    let lines: Vec<serde_json::Value> = fs::read_to_string(d.join("emb/embeddings.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines.iter().filter(|l| l["empty"] == true).count(), 2);
    assert!(lines.iter().all(|l| l["vector"].as_array().unwrap().len() == 8));

    fs::write(d.join("an.cfg"), "input_path = train.jsonl\nmodel_dir = run\n").unwrap();
    ok(&hitkit(&["analyze-embeddings", "--config", "an.cfg", "--out-dir", "an"], d));
    let a: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("an/analysis.json")).unwrap()).unwrap();
    assert_eq!(a["k"], 2);
    assert_eq!(a["assignments"].as_array().unwrap().len(), 6);
}

#[test]
fn seed_environment_variable_overrides_config() {
    let dir = classification_dir();
    let d = dir.path();
    let out = Command::new(BIN)
        .args(["train", "--config", "c.cfg", "--out-dir", "run"])
        .current_dir(d)
        .env("HITKIT_SEED", "77")
        .output()
        .unwrap();
    ok(&out);
    assert!(fs::read_to_string(d.join("run/config.txt")).unwrap().contains("seed = 77\n"));
    let out = Command::new(BIN)
        .args(["train", "--config", "c.cfg", "--out-dir", "run2", "--seed", "78"])
        .current_dir(d)
        .env("HITKIT_SEED", "77")
        .output()
        .unwrap();
    ok(&out);
    assert!(fs::read_to_string(d.join("run2/config.txt")).unwrap().contains("seed = 78\n"));
}

#[test]
fn generation_and_pretraining_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let pairs = ["a b c", "b c d", "c d a", "d a b"];
    let gen: String = pairs.iter().map(|p| format!("{{\"source\": \"{p}\", \"target\": \"{p}\"}}\n")).collect();
    fs::write(d.join("gen.jsonl"), gen).unwrap();
    fs::write(d.join("g.cfg"), format!("{SMALL}dataset_kind = generation\ntrain_path = gen.jsonl\nl_dec = 1\nmax_out = 6\n")).unwrap();
    ok(&hitkit(&["train", "--config", "g.cfg", "--out-dir", "gen"], d));
    let m = fs::read_to_string(d.join("gen/metrics.json")).unwrap();
    assert!(m.contains("bleu") && m.contains("meteor_lite"));
    fs::write(d.join("src.txt"), "a b\n\nc d a\n").unwrap();
    fs::write(d.join("gg.cfg"), "input_path = src.txt\nmodel_dir = gen\nmax_out = 4\n").unwrap();
    ok(&hitkit(&["generate", "--config", "gg.cfg", "--out-dir", "g2"], d));
    assert_eq!(fs::read_to_string(d.join("g2/generations.txt")).unwrap().lines().count(), 3);

    fs::write(d.join("corpus.txt"), "bahut accha film\nbekar film yaar\nmaza aaya bhai\nboring film tha\n").unwrap();
    fs::write(d.join("m.cfg"), format!("{SMALL}corpus_path = corpus.txt\n")).unwrap();
    ok(&hitkit(&["pretrain-mlm", "--config", "m.cfg", "--out-dir", "mlm"], d));
    let data = "{\"text\": \"accha film\", \"label\": \"positive\"}\n{\"text\": \"bekar film\", \"label\": \"negative\"}\n";
    fs::write(d.join("t.jsonl"), data).unwrap();
    fs::write(d.join("ft.cfg"), format!("{SMALL}train_path = t.jsonl\ninit_from = mlm\ntransfer_mode = frozen\n")).unwrap();
    ok(&hitkit(&["train", "--config", "ft.cfg", "--out-dir", "ft"], d));

    fs::write(d.join("z.cfg"), format!("{SMALL}train_path = t.jsonl\ntest_path = t.jsonl\n")).unwrap();
    ok(&hitkit(&["pretrain-zsl", "--config", "z.cfg", "--out-dir", "zsl"], d));
    let m = fs::read_to_string(d.join("zsl/metrics.json")).unwrap();
    assert!(m.contains("zero_shot_accuracy"));
}
