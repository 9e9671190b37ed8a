//! On-disk datastore of documents, embeddings and provider cache blobs.
//!
//! Layout of a store directory:
//!
//! ```text
//! <store>/manifest.json       entry list, vocabulary, provider id, checksums
//! <store>/blobs/000000.bin    raw cache blob of entry 0
//! <store>/blobs/000001.bin    ...
//! ```
//!
//! The manifest is JSON with these top-level fields: `format`
//! (`"pced-store/1"`), `provider`, `checksum_algorithm` (`"sha256"`),
//! `embedder`, `embedding_dim`, `prompt_prefix`, `document_terminator`,
//! `vocabulary`, `entry_count` and `entries`. Each entry carries `doc_id`,
//! `text`, `tokens` (the exact sequence the blob encodes), `embedding`,
//! optional `raw_scores`, `blob_file`, `blob_len` and `blob_sha256`
//! (lowercase hex). A store is immutable once built or loaded.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use pced_core::score::RawScore;
use pced_core::{LogitProvider, RelevanceScore, ScoreMode, TokenId};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scorers::{cosine, term_overlap, Embedder, Reranker};
use crate::text::Vocabulary;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_DIR: &str = "blobs";
pub const FORMAT: &str = "pced-store/1";
pub const CHECKSUM_ALGORITHM: &str = "sha256";

/// Externally supplied raw scores that override the built-in scorers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawScores {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub colbert: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reranker: Option<f64>,
}

impl RawScores {
    pub fn get(&self, mode: ScoreMode) -> Option<f64> {
        match mode {
            ScoreMode::Dense => self.dense,
            ScoreMode::Colbert => self.colbert,
            ScoreMode::Sparse => self.sparse,
            ScoreMode::Reranker => self.reranker,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusDoc {
    pub id: String,
    pub text: String,
    pub raw_scores: Option<RawScores>,
}

impl CorpusDoc {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        CorpusDoc { id: id.into(), text: text.into(), raw_scores: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub doc_id: String,
    pub text: String,
    pub tokens: Vec<TokenId>,
    pub embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_scores: Option<RawScores>,
    pub blob_file: String,
    pub blob_len: u64,
    pub blob_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub provider: String,
    pub checksum_algorithm: String,
    pub embedder: String,
    pub embedding_dim: usize,
    pub prompt_prefix: String,
    pub document_terminator: bool,
    pub vocabulary: Vec<String>,
    pub entry_count: usize,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    /// Text encoded ahead of every document inside its cache.
    pub prompt_prefix: String,
    /// Append the provider's first stop token after each document.
    pub terminate_documents: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { prompt_prefix: String::new(), terminate_documents: true }
    }
}

/// One retrieved document with its raw and normalized scores.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Retrieved {
    pub doc_id: String,
    /// Entry index in the store.
    pub index: usize,
    pub raw_retrieval: f64,
    pub raw_reranker: f64,
    pub score: RelevanceScore,
}

/// Retrieved documents ordered by descending fused score, ties by doc id.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RetrievalResult {
    pub entries: Vec<Retrieved>,
}

impl RetrievalResult {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Store {
    manifest: Manifest,
    vocab: Vocabulary,
    blobs: Vec<Vec<u8>>,
    index: HashMap<String, usize>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn blob_file(i: usize) -> String {
    format!("{BLOB_DIR}/{i:06}.bin")
}

impl Store {
    /// Encodes every document with `provider` and computes its embedding.
    ///
    /// `vocab` must cover the corpus and fit the provider's vocabulary.
    pub fn build<P: LogitProvider>(
        corpus: &[CorpusDoc],
        vocab: &Vocabulary,
        embedder: &dyn Embedder,
        provider: &P,
        options: &BuildOptions,
    ) -> Result<Store> {
        if vocab.len() > provider.vocab_size() {
            return Err(Error::Config(format!(
                "vocabulary has {} words but provider accepts {}",
                vocab.len(),
                provider.vocab_size()
            )));
        }
        let mut index = HashMap::with_capacity(corpus.len());
        for (i, doc) in corpus.iter().enumerate() {
            if index.insert(doc.id.clone(), i).is_some() {
                return Err(Error::DuplicateDocument(doc.id.clone()));
            }
        }
        let prefix = vocab.encode(&options.prompt_prefix);
        let terminator = provider.stop_tokens().first().copied();
        let mut entries = Vec::with_capacity(corpus.len());
        let mut blobs = Vec::with_capacity(corpus.len());
        for (i, doc) in corpus.iter().enumerate() {
            let mut tokens = prefix.clone();
            tokens.extend(vocab.encode(&doc.text));
            if options.terminate_documents {
                tokens.extend(terminator);
            }
            let blob =
                provider.prefill(&tokens).map_err(|source| Error::BuildFailed { doc_id: doc.id.clone(), source })?;
            let embedding = embedder.embed(&doc.text);
            if embedding.len() != embedder.dim() {
                return Err(Error::DimensionMismatch { expected: embedder.dim(), found: embedding.len() });
            }
            entries.push(ManifestEntry {
                doc_id: doc.id.clone(),
                text: doc.text.clone(),
                tokens,
                embedding,
                raw_scores: doc.raw_scores.clone(),
                blob_file: blob_file(i),
                blob_len: blob.len() as u64,
                blob_sha256: sha256_hex(&blob),
            });
            blobs.push(blob);
        }
        let manifest = Manifest {
            format: FORMAT.to_string(),
            provider: provider.id(),
            checksum_algorithm: CHECKSUM_ALGORITHM.to_string(),
            embedder: embedder.id(),
            embedding_dim: embedder.dim(),
            prompt_prefix: options.prompt_prefix.clone(),
            document_terminator: options.terminate_documents,
            vocabulary: vocab.words().to_vec(),
            entry_count: entries.len(),
            entries,
        };
        Ok(Store { manifest, vocab: vocab.clone(), blobs, index })
    }

    /// Writes the manifest and blob files under `dir`, creating it if needed.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        let blob_dir = dir.join(BLOB_DIR);
        fs::create_dir_all(&blob_dir).map_err(Error::io(&blob_dir))?;
        for (entry, blob) in self.manifest.entries.iter().zip(&self.blobs) {
            let path = dir.join(&entry.blob_file);
            fs::write(&path, blob).map_err(Error::io(&path))?;
        }
        let json = serde_json::to_string_pretty(&self.manifest).map_err(Error::json(dir.join(MANIFEST_FILE)))?;
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, json + "\n").map_err(Error::io(&tmp))?;
        let path = dir.join(MANIFEST_FILE);
        fs::rename(&tmp, &path).map_err(Error::io(&path))?;
        Ok(())
    }

    /// Loads a store and verifies every blob against its recorded checksum.
    pub fn load(dir: &Path) -> Result<Store> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(Error::json(&path))?;
        if manifest.format != FORMAT {
            return Err(Error::Corrupt(format!("unsupported store format {:?}", manifest.format)));
        }
        if manifest.checksum_algorithm != CHECKSUM_ALGORITHM {
            return Err(Error::Corrupt(format!("unsupported checksum {:?}", manifest.checksum_algorithm)));
        }
        if manifest.entry_count != manifest.entries.len() {
            return Err(Error::Corrupt(format!(
                "entry_count {} but {} entries listed",
                manifest.entry_count,
                manifest.entries.len()
            )));
        }
        let vocab = Vocabulary::from_words(manifest.vocabulary.clone())
            .ok_or_else(|| Error::Corrupt("invalid vocabulary".into()))?;
        let mut index = HashMap::with_capacity(manifest.entries.len());
        let mut blobs = Vec::with_capacity(manifest.entries.len());
        for (i, entry) in manifest.entries.iter().enumerate() {
            if index.insert(entry.doc_id.clone(), i).is_some() {
                return Err(Error::Corrupt(format!("duplicate document id {:?}", entry.doc_id)));
            }
            if entry.embedding.len() != manifest.embedding_dim {
                return Err(Error::Corrupt(format!("embedding of {:?} has wrong dimension", entry.doc_id)));
            }
            let blob_path = dir.join(&entry.blob_file);
            let blob = fs::read(&blob_path).map_err(Error::io(&blob_path))?;
            if blob.len() as u64 != entry.blob_len || sha256_hex(&blob) != entry.blob_sha256 {
                return Err(Error::Corrupt(format!("checksum mismatch for blob of {:?}", entry.doc_id)));
            }
            blobs.push(blob);
        }
        Ok(Store { manifest, vocab, blobs, index })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.manifest.entries
    }

    pub fn entry(&self, doc_id: &str) -> Result<&ManifestEntry> {
        self.index.get(doc_id).map(|&i| &self.manifest.entries[i]).ok_or_else(|| Error::NotFound(doc_id.to_string()))
    }

    pub fn get_blob(&self, doc_id: &str) -> Result<&[u8]> {
        self.index.get(doc_id).map(|&i| self.blobs[i].as_slice()).ok_or_else(|| Error::NotFound(doc_id.to_string()))
    }

    pub fn blob_at(&self, index: usize) -> &[u8] {
        &self.blobs[index]
    }

    /// Two-stage retrieval: the top `n` entries by normalized retrieval score
    /// are reranked, fused, and returned by descending fused score.
    ///
    /// Raw scores recorded on an entry take precedence over the built-in
    /// scorers: cosine similarity for dense and colbert, distinct-word overlap
    /// for sparse, and `reranker` for the cross-encoder logit.
    pub fn retrieve(
        &self,
        query_embedding: &[f64],
        query_text: &str,
        n: usize,
        mode: ScoreMode,
        reranker: &dyn Reranker,
    ) -> Result<RetrievalResult> {
        if n == 0 {
            return Err(Error::Config("retrieval size must be at least 1".into()));
        }
        if mode == ScoreMode::Reranker {
            return Err(Error::Config("reranker is not a retrieval mode".into()));
        }
        if self.is_empty() {
            return Ok(RetrievalResult::default());
        }
        if query_embedding.len() != self.manifest.embedding_dim {
            return Err(Error::DimensionMismatch {
                expected: self.manifest.embedding_dim,
                found: query_embedding.len(),
            });
        }
        let mut first = Vec::with_capacity(self.len());
        for (i, e) in self.manifest.entries.iter().enumerate() {
            let raw = match e.raw_scores.as_ref().and_then(|s| s.get(mode)) {
                Some(v) => v,
                None => match mode {
                    ScoreMode::Sparse => term_overlap(query_text, &e.text),
                    _ => cosine(query_embedding, &e.embedding),
                },
            };
            let norm = RawScore::new(raw, mode)?.normalize();
            first.push((i, raw, norm));
        }
        let id = |i: usize| self.manifest.entries[i].doc_id.as_str();
        first.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| id(a.0).cmp(id(b.0))));
        first.truncate(n);

        let mut out = Vec::with_capacity(first.len());
        for (i, raw_retrieval, retrieval) in first {
            let e = &self.manifest.entries[i];
            let raw_reranker = match e.raw_scores.as_ref().and_then(|s| s.reranker) {
                Some(v) => v,
                None => reranker.score(query_text, &e.doc_id, &e.text),
            };
            let rer = RawScore::new(raw_reranker, ScoreMode::Reranker)?.normalize();
            out.push(Retrieved {
                doc_id: e.doc_id.clone(),
                index: i,
                raw_retrieval,
                raw_reranker,
                score: RelevanceScore::from_normalized(retrieval, rer),
            });
        }
        out.sort_by(|a, b| b.score.fused.total_cmp(&a.score.fused).then_with(|| a.doc_id.cmp(&b.doc_id)));
        Ok(RetrievalResult { entries: out })
    }
}
