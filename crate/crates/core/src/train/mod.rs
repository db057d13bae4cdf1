//! Training loop with reduce-on-plateau and early stopping, evaluation,
//! and the end-to-end runs behind the command line.

mod config;
pub mod eval;
mod fit;
pub mod objectives;
pub mod pipeline;
mod schedule;

pub use config::{TrainConfig, SEED_ENV};
pub use fit::{derive_seed, fit, mean_loss, train_batches, EpochRecord, FitOptions, History, Objective, StopReason};
pub use schedule::{Schedule, Step};
