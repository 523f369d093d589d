//! Median ensembling of adversarial-training checkpoints, with the training,
//! attack and analysis machinery around it.

// `!(lo < hi)` is used on purpose: it also rejects NaN bounds.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod attack;
pub mod diffnet;
pub mod ensemble;
pub mod error;
pub mod exec;
pub mod harness;
pub mod numcore;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;
