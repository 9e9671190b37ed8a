//! Parallel context-of-experts decoding, allocation-only core.
//!
//! The crate is `no_std` (it needs `alloc`) and carries everything that is
//! pure computation:
//!
//! * [`score`]: normalization of raw retrieval / reranker scores and their
//!   harmonic-mean fusion into a per-document prior.
//! * [`lm`]: the logit-provider contract and a deterministic toy model that
//!   implements it.
//! * [`decoder`]: contrastive calibration against an amateur stream, the
//!   retrieval prior, cross-expert token selection and the decode loop with
//!   a shared generation history.
//! * [`synthetic`]: the secret-code latency dataset generator.
//!
//! IO, persistence, timing and the command line live in the `pced` crate.

#![no_std]

extern crate alloc;

pub mod decoder;
pub mod lm;
pub mod score;
pub mod synthetic;

pub use decoder::{
    calibrate, decode, dynamic_beta, select_token, Aggregation, BetaPolicy, DecodeConfig, DecodeError, DecodeOutput,
    Decoder, ExpertInput, ExpertSnapshot, Selection, StepTrace, TieBreak,
};
pub use lm::{LogitProvider, LogitVector, ProviderError, ProviderSession, TokenId, ToyConfig, ToyModel, ToySession};
pub use score::{RawScore, RelevanceScore, ScoreError, ScoreMode, EPSILON};
