//! Hierarchical character/word transformer for informal, code-mixed text.
//!
//! [`tensor`] is a double-precision reverse-mode autodiff tape. [`attention`]
//! and [`encoders`] build the fused-attention encoder on top of it, and
//! [`tasks`] adds classification, labeling and generation heads. [`data`] and
//! [`features`] turn JSON Lines datasets into model inputs. [`pretrain`] holds
//! masked-word and zero-shot pretraining, [`train`] the training loop and
//! run pipeline behind the `hitkit` binary, and [`metrics`] the evaluation
//! scores.

pub mod attention;
pub mod data;
pub mod encoders;
pub mod error;
pub mod features;
pub mod metrics;
pub mod pretrain;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
