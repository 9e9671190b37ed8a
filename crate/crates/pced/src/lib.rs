//! Std companion to `pced-core`: the on-disk cache store, built-in scorers,
//! the latency harness, ablation sweeps, trace files and the `pced` command
//! line.

pub mod bench;
pub mod cli;
pub mod engine;
pub mod error;
pub mod provider;
pub mod scorers;
pub mod store;
pub mod sweeps;
pub mod text;
pub mod trace;

pub use error::{Error, Result};
