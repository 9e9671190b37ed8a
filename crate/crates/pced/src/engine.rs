//! Glue between the store's retrieval results and the core decoder.

use pced_core::decoder::{DecodeError, Decoder};
use pced_core::{DecodeConfig, DecodeOutput, ExpertInput, LogitProvider, TokenId};

use crate::store::{RetrievalResult, Store};

/// One contextual expert per retrieved document, in retrieval order.
pub fn expert_inputs<'s>(store: &'s Store, retrieval: &RetrievalResult) -> Vec<ExpertInput<'s>> {
    retrieval.entries.iter().map(|r| ExpertInput { blob: store.blob_at(r.index), relevance: r.score.fused }).collect()
}

/// Runs parallel context-of-experts decoding over the retrieved documents.
pub fn decode_retrieved<P: LogitProvider>(
    store: &Store,
    retrieval: &RetrievalResult,
    query: &[TokenId],
    config: DecodeConfig,
    provider: &P,
) -> Result<DecodeOutput, DecodeError> {
    let experts = expert_inputs(store, retrieval);
    let mut decoder = Decoder::start(provider, &experts, query, config)?;
    while decoder.step()?.is_some() {}
    Ok(decoder.finish())
}

/// Greedy decoding of a single document's cached tokens followed by the
/// query, replayed from an empty session. With one expert, `beta = 0` and
/// `gamma = 0` the parallel decoder must reproduce this exactly.
pub fn greedy_reference<P: LogitProvider>(
    store: &Store,
    doc_index: usize,
    query: &[TokenId],
    max_tokens: usize,
    provider: &P,
) -> Result<Vec<TokenId>, pced_core::ProviderError> {
    let mut prefix = store.entries()[doc_index].tokens.clone();
    prefix.extend_from_slice(query);
    pced_core::lm::greedy_decode(provider, &[], &prefix, max_tokens)
}
