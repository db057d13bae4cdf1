use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hitkit::train::pipeline::{self, RunSummary};
use hitkit::train::{TrainConfig, SEED_ENV};

/// Hierarchical character/word transformer for code-mixed text.
#[derive(Parser)]
#[command(name = "hitkit", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` run configuration.
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Overrides both the config seed and HITKIT_SEED.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR", default_value = "runs")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classification, labeling or generation model.
    Train(Common),
    /// Score a trained model on `test_path`.
    Evaluate(Common),
    /// Masked language model pretraining on `corpus_path`.
    PretrainMlm(Common),
    /// Label-entailment pretraining for zero-shot classification.
    PretrainZsl(Common),
    /// Write one sentence embedding per line of `input_path`.
    Embed(Common),
    /// Greedy decoding of every line of `input_path`.
    Generate(Common),
    /// k-means plus silhouette and Davies-Bouldin over embeddings.
    AnalyzeEmbeddings(Common),
}

fn summary(name: &str, s: &RunSummary) {
    let last = s.history.epochs.last().map_or(0, |e| e.epoch + 1);
    println!(
        "{name}: {last} epochs ({:?}), best val loss {:.6} at epoch {}",
        s.history.stop_reason, s.history.best_val_loss, s.history.best_epoch
    );
    for (k, v) in &s.report.metrics {
        println!("  {k} = {v:.6}");
    }
}

fn run(cmd: Command) -> hitkit::Result<()> {
    let (Command::Train(c)
    | Command::Evaluate(c)
    | Command::PretrainMlm(c)
    | Command::PretrainZsl(c)
    | Command::Embed(c)
    | Command::Generate(c)
    | Command::AnalyzeEmbeddings(c)) = &cmd;
    let mut cfg = TrainConfig::load(&c.config)?;
    cfg.resolve_seed(std::env::var(SEED_ENV).ok().as_deref(), c.seed)?;
    let out = &c.out_dir;
    match cmd {
        Command::Train(_) => summary("train", &pipeline::run_train(&cfg, out)?),
        Command::PretrainMlm(_) => summary("pretrain-mlm", &pipeline::run_pretrain_mlm(&cfg, out)?),
        Command::PretrainZsl(_) => summary("pretrain-zsl", &pipeline::run_pretrain_zsl(&cfg, out)?),
        Command::Evaluate(_) => {
            let r = pipeline::run_evaluate(&cfg, out)?;
            for (k, v) in &r.metrics {
                println!("{k} = {v:.6}");
            }
        }
        Command::Embed(_) => {
            let n = pipeline::run_embed(&cfg, out)?;
            println!("embedded {n} lines into {}", out.join(pipeline::EMBEDDINGS_FILE).display());
        }
        Command::Generate(_) => {
            let lines = pipeline::run_generate(&cfg, out)?;
            println!("decoded {} lines into {}", lines.len(), out.join(pipeline::GENERATIONS_FILE).display());
        }
        Command::AnalyzeEmbeddings(_) => {
            let a = pipeline::run_analyze(&cfg, out)?;
            println!(
                "k = {} over {} points: silhouette {:.4}, davies-bouldin {:.4}",
                a.k, a.points, a.kmeans.silhouette, a.kmeans.davies_bouldin
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hitkit: {e}");
            ExitCode::FAILURE
        }
    }
}
