//! Flat `key = value` run configuration.
//!
//! One key per line, `#` starts a comment, blank lines are ignored. Keys
//! are exactly the field names of [`TrainConfig`]; an unknown or repeated
//! key is an error. Relative paths resolve against the config file's
//! directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::attention::{OpaCombine, OpaScore};
use crate::data::{DatasetKind, Limits, TaskKind};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::features::{DocLimit, TfidfConfig};
use crate::pretrain::TransferMode;

/// Overrides the config seed; `--seed` overrides both.
pub const SEED_ENV: &str = "HITKIT_SEED";

trait Value: Sized {
    fn parse(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> Option<String>;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> Option<String> {
                Some(self.to_string())
            }
        }
    )*};
}

from_str_value!(f64, usize, u64, bool);

macro_rules! enum_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e: Error| e.to_string())
            }
            fn render(&self) -> Option<String> {
                serde_json::to_value(self).ok().and_then(|v| v.as_str().map(String::from))
            }
        }
    )*};
}

enum_value!(OpaScore, OpaCombine, TaskKind, DatasetKind, TransferMode);

impl Value for DocLimit {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        DocLimit::parse(s).ok_or_else(|| format!("`{s}` is neither a count nor a fraction like 0.5f"))
    }
    fn render(&self) -> Option<String> {
        Some(DocLimit::render(*self))
    }
}

impl Value for Option<PathBuf> {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        Ok(Some(PathBuf::from(s)))
    }
    fn render(&self) -> Option<String> {
        self.as_ref().map(|p| p.display().to_string())
    }
}

impl Value for Option<TaskKind> {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        <TaskKind as Value>::parse(s).map(Some)
    }
    fn render(&self) -> Option<String> {
        self.as_ref().and_then(Value::render)
    }
}

impl Value for Option<usize> {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        <usize as Value>::parse(s).map(Some)
    }
    fn render(&self) -> Option<String> {
        self.map(|v| v.to_string())
    }
}

macro_rules! config {
    ($($(#[doc = $doc:literal])* $name:ident: $ty:ty = $default:expr,)*) => {
        /// Every tunable of a run. Paths are optional and only the ones a
        /// subcommand needs are checked.
        #[derive(Clone, Debug, PartialEq)]
        pub struct TrainConfig {
            $($(#[doc = $doc])* pub $name: $ty,)*
        }

        impl Default for TrainConfig {
            fn default() -> Self {
                Self { $($name: $default,)* }
            }
        }

        impl TrainConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $(stringify!($name) => self.$name = Value::parse(value)?,)*
                    _ => return Err(format!("unknown key `{key}`")),
                }
                Ok(())
            }

            /// Canonical text form: every set key in declaration order.
            pub fn render(&self) -> String {
                let mut out = String::new();
                $(if let Some(v) = Value::render(&self.$name) {
                    out.push_str(&format!("{} = {}\n", stringify!($name), v));
                })*
                out
            }
        }
    };
}

config! {
    lr: f64 = 1e-3,
    beta1: f64 = 0.9,
    beta2: f64 = 0.999,
    epochs: usize = 500,
    batch_size: usize = 32,
    dropout: f64 = 0.2,
    plateau_patience: usize = 20,
    plateau_factor: f64 = 0.7,
    early_stop_patience: usize = 100,
    d_model: usize = 128,
    l_c: usize = 1,
    l_w: usize = 2,
    n_heads: usize = 4,
    opa_score: OpaScore = OpaScore::Tanh,
    opa_combine: OpaCombine = OpaCombine::TrueOuterProjected,
    seed: u64 = 0,
    use_tfidf: bool = false,
    max_len: usize = 40,
    max_word_len: usize = 20,
    /// Feed-forward width inside every layer; defaults to `4 · d_model`.
    d_ff: Option<usize> = None,
    /// Decoder depth for generation.
    l_dec: usize = 2,
    grad_clip: f64 = 5.0,
    /// Fraction of train carved out for validation when `val_path` is unset.
    val_ratio: f64 = 0.1,
    min_freq: u64 = 1,
    lowercase: bool = true,
    tfidf_min_df: DocLimit = DocLimit::Count(2),
    tfidf_max_df: DocLimit = DocLimit::Count(6),
    stopwords_path: Option<PathBuf> = None,
    /// Defaults to the task implied by the dataset kind.
    task: Option<TaskKind> = None,
    dataset_kind: DatasetKind = DatasetKind::Classification,
    train_path: Option<PathBuf> = None,
    val_path: Option<PathBuf> = None,
    test_path: Option<PathBuf> = None,
    /// Pretraining corpus: one sentence per line.
    corpus_path: Option<PathBuf> = None,
    /// Plain-text input for `embed`, `generate` and `analyze-embeddings`.
    input_path: Option<PathBuf> = None,
    /// Directory of a trained run; defaults to the output directory.
    model_dir: Option<PathBuf> = None,
    /// Pretrained run whose encoder (and vocabulary) seeds training.
    init_from: Option<PathBuf> = None,
    transfer_mode: TransferMode = TransferMode::Finetune,
    tau: f64 = crate::pretrain::DEFAULT_TAU,
    neg_per_pos: usize = 1,
    max_out: usize = 40,
    /// Cluster count for embedding analysis; defaults to the label count.
    clusters: Option<usize> = None,
    kmeans_iters: usize = 100,
}

impl TrainConfig {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        let base = path.parent().unwrap_or(Path::new(""));
        for (i, raw) in text.lines().enumerate() {
            let err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(err(format!("key `{k}` given twice")));
            }
            cfg.set(k, v).map_err(|m| err(format!("{k}: {m}")))?;
        }
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.stopwords_path,
            &mut self.train_path,
            &mut self.val_path,
            &mut self.test_path,
            &mut self.corpus_path,
            &mut self.input_path,
            &mut self.model_dir,
            &mut self.init_from,
        ] {
            if let Some(path) = p.as_mut() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("plateau_patience", self.plateau_patience),
            ("early_stop_patience", self.early_stop_patience),
            ("d_model", self.d_model),
            ("l_c", self.l_c),
            ("l_w", self.l_w),
            ("n_heads", self.n_heads),
            ("max_len", self.max_len),
            ("max_word_len", self.max_word_len),
            ("d_ff", self.d_ff()),
            ("l_dec", self.l_dec),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{k} must be positive")));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("lr must be positive"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::invalid("plateau_factor must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.val_ratio) {
            return Err(Error::invalid("val_ratio must lie in [0, 1)"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid("d_model must be divisible by n_heads"));
        }
        if !(self.tau > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::invalid("tau and grad_clip must be positive"));
        }
        Ok(())
    }

    /// Applies the seed precedence: config, then the environment, then the
    /// command line.
    pub fn resolve_seed(&mut self, env: Option<&str>, cli: Option<u64>) -> Result<()> {
        if let Some(s) = env.map(str::trim).filter(|s| !s.is_empty()) {
            self.seed = s
                .parse()
                .map_err(|_| Error::invalid(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?;
        }
        if let Some(s) = cli {
            self.seed = s;
        }
        Ok(())
    }

    pub fn task(&self) -> TaskKind {
        self.task.unwrap_or(match self.dataset_kind {
            DatasetKind::Classification => TaskKind::Classification,
            DatasetKind::Labeling => TaskKind::Labeling,
            DatasetKind::Generation | DatasetKind::Dialog => TaskKind::Generation,
        })
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            l_c: self.l_c,
            l_w: self.l_w,
            d_ff: self.d_ff(),
            dropout: self.dropout,
            opa_score: self.opa_score,
            opa_combine: self.opa_combine,
            max_len: self.max_len,
            max_word_len: self.max_word_len,
        }
    }

    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d_model)
    }

    pub fn limits(&self) -> Limits {
        Limits { max_len: self.max_len, max_word_len: self.max_word_len }
    }

    pub fn tfidf(&self) -> TfidfConfig {
        TfidfConfig { min_df: self.tfidf_min_df, max_df: self.tfidf_max_df }
    }

    pub fn require<'a>(&self, key: &str, v: &'a Option<PathBuf>) -> Result<&'a Path> {
        v.as_deref().ok_or_else(|| Error::invalid(format!("config key `{key}` is required here")))
    }
}
