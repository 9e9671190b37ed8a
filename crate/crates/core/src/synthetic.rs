//! Secret-code latency dataset.
//!
//! Each instance holds `n_docs` documents of exactly `doc_len` tokens. One
//! gold document contains the marker token followed by a short secret code;
//! all other tokens are filler that never uses the marker, the instruction
//! tokens or any code token. The query is a fixed instruction sequence that
//! ends with the marker, so a model that copies from the gold document
//! answers with the code.

use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::lm::{TokenId, TOY_FIRST_FREE};

pub const MARKER: TokenId = TOY_FIRST_FREE;
/// Fixed instruction tokens, followed by [`MARKER`] in every query.
pub const INSTRUCTION: [TokenId; 4] = [4, 5, 6, 7];
const FIRST_CONTENT: TokenId = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticConfig {
    pub n_docs: usize,
    pub doc_len: usize,
    pub code_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    pub const DEFAULT_VOCAB: usize = 512;
    pub const DEFAULT_CODE_LEN: usize = 4;

    pub fn new(n_docs: usize, doc_len: usize, seed: u64) -> Self {
        SyntheticConfig { n_docs, doc_len, code_len: Self::DEFAULT_CODE_LEN, vocab_size: Self::DEFAULT_VOCAB, seed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticError {
    NoDocuments,
    /// Documents must fit the marker plus the code.
    DocumentTooShort {
        doc_len: usize,
        needed: usize,
    },
    VocabularyTooSmall {
        vocab_size: usize,
        needed: usize,
    },
}

impl fmt::Display for SyntheticError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SyntheticError::NoDocuments => f.write_str("at least one document is required"),
            SyntheticError::DocumentTooShort { doc_len, needed } => {
                write!(f, "document length {doc_len} cannot hold the marker and code ({needed} tokens)")
            }
            SyntheticError::VocabularyTooSmall { vocab_size, needed } => {
                write!(f, "vocabulary of {vocab_size} tokens is too small (need at least {needed})")
            }
        }
    }
}

impl core::error::Error for SyntheticError {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticInstance {
    pub documents: Vec<Vec<TokenId>>,
    pub gold_index: usize,
    pub secret_code: Vec<TokenId>,
    pub query: Vec<TokenId>,
}

impl SyntheticInstance {
    /// Number of documents containing the full code as a contiguous run.
    pub fn code_occurrences(&self) -> usize {
        self.documents
            .iter()
            .filter(|d| d.windows(self.secret_code.len()).any(|w| w == self.secret_code.as_slice()))
            .count()
    }
}

/// [`generate_with`] using the default vocabulary and code length.
pub fn generate_synthetic(n_docs: usize, doc_len: usize, seed: u64) -> Result<SyntheticInstance, SyntheticError> {
    generate_with(SyntheticConfig::new(n_docs, doc_len, seed))
}

pub fn generate_with(config: SyntheticConfig) -> Result<SyntheticInstance, SyntheticError> {
    let SyntheticConfig { n_docs, doc_len, code_len, vocab_size, seed } = config;
    if n_docs == 0 {
        return Err(SyntheticError::NoDocuments);
    }
    let needed = code_len + 1;
    if doc_len < needed {
        return Err(SyntheticError::DocumentTooShort { doc_len, needed });
    }
    // Content ids must cover the code plus at least one filler token.
    let min_vocab = FIRST_CONTENT as usize + code_len + 1;
    if vocab_size < min_vocab {
        return Err(SyntheticError::VocabularyTooSmall { vocab_size, needed: min_vocab });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gold_index = rng.random_range(0..n_docs);

    let mut secret_code: Vec<TokenId> = Vec::with_capacity(code_len);
    while secret_code.len() < code_len {
        let t = rng.random_range(FIRST_CONTENT..vocab_size as TokenId);
        if !secret_code.contains(&t) {
            secret_code.push(t);
        }
    }
    let mut filler: Vec<TokenId> =
        (FIRST_CONTENT..vocab_size as TokenId).filter(|t| !secret_code.contains(t)).collect();
    filler.sort_unstable();

    let documents = (0..n_docs)
        .map(|i| {
            let mut doc: Vec<TokenId> = (0..doc_len).map(|_| filler[rng.random_range(0..filler.len())]).collect();
            if i == gold_index {
                let at = rng.random_range(0..=doc_len - needed);
                doc[at] = MARKER;
                doc[at + 1..at + needed].copy_from_slice(&secret_code);
            }
            doc
        })
        .collect();

    let mut query = INSTRUCTION.to_vec();
    query.push(MARKER);
    Ok(SyntheticInstance { documents, gold_index, secret_code, query })
}
