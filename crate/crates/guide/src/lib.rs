//! The hitkit book, compiled.
//!
//! mdbook cannot run listings against a workspace crate, so each chapter is
//! pulled in as the doc comment of its own module and `cargo test --doc`
//! runs every code block. One module per chapter keeps failures traceable
//! to a file.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/tensors.md")]
pub mod tensors {}
#[doc = include_str!("../../../book/src/attention.md")]
pub mod attention {}
#[doc = include_str!("../../../book/src/encoders.md")]
pub mod encoders {}
#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}
#[doc = include_str!("../../../book/src/features.md")]
pub mod features {}
#[doc = include_str!("../../../book/src/tasks.md")]
pub mod tasks {}
#[doc = include_str!("../../../book/src/pretraining.md")]
pub mod pretraining {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}
