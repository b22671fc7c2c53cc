//! Training-free test-time adaptation of normalization statistics.
//!
//! The crate estimates target-domain normalization statistics from a stream
//! of (possibly tiny) test batches with a momentum-selected moving average,
//! then rectifies them against source statistics layer by layer using the
//! divergence between the two. A synthetic domain-shift simulator and CLI
//! exercise the whole pipeline.

// Validation uses `!(x >= 0.0)` on purpose: it rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod diversity;
pub mod engine;
pub mod error;
pub mod harness;
pub mod momentum;
pub mod rectifier;
pub mod stats;

pub use error::{Error, Result};
