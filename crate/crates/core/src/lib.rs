//! Self-supervised foundation-model toolkit for irregularly sampled wearable
//! behavioral data.
//!
//! The crate covers the whole path from raw `(subject, hour, variable, value)`
//! measurements to probed week embeddings:
//!
//! * [`synthgen`] builds deterministic synthetic cohorts with planted effects.
//! * [`pipeline`] aggregates hourly, builds Monday-aligned week grids, filters,
//!   splits and z-scores them.
//! * [`nn`] is the numerical substrate: a tape-based reverse-mode engine over
//!   packed variable-length sequences, parameter trees, AdamW and the learning
//!   rate schedule.
//! * [`tokenizers`] and [`backbones`] turn a week into tokens and tokens into a
//!   pooled embedding.
//! * [`pretrain`] holds the contrastive objective and the training loops.
//! * [`eval`] extracts embeddings and runs ridge linear probes with bootstrap
//!   confidence intervals.
//! * [`io`], [`config`] and [`cli`] provide file formats and the `wbm` command.

pub mod backbones;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod pretrain;
pub mod synthgen;
pub mod tokenizers;

pub use error::{Error, Result};
