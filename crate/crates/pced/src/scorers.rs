//! Pluggable retrieval and reranking scorers plus their deterministic test
//! implementations.

use sha2::{Digest, Sha256};

use crate::text::words;

/// Maps text to a fixed-dimension vector for dense retrieval.
pub trait Embedder: Send + Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Produces a raw cross-encoder logit for a (query, document) pair.
pub trait Reranker: Send + Sync {
    fn id(&self) -> String;
    fn score(&self, query: &str, doc_id: &str, text: &str) -> f64;
}

fn digest(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

fn unit_from(bytes: &[u8]) -> f64 {
    let mut a = [0u8; 8];
    a.copy_from_slice(&bytes[..8]);
    (u64::from_le_bytes(a) >> 11) as f64 / (1u64 << 53) as f64
}

/// Signed feature hashing of the word bag, L2-normalized.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(dim: usize) -> Self {
        assert!(dim > 0);
        HashEmbedder { dim }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM)
    }
}

impl Embedder for HashEmbedder {
    fn id(&self) -> String {
        format!("hash-bow:dim={}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for w in words(text) {
            let d = digest(&[w.as_bytes()]);
            let slot = (u64::from_le_bytes(d[..8].try_into().unwrap()) % self.dim as u64) as usize;
            v[slot] += if d[8] & 1 == 0 { 1.0 } else { -1.0 };
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

/// Deterministic reranker: a seeded hash of (query text, doc id) mapped to a
/// logit in `[-6, 6)`.
#[derive(Debug, Clone)]
pub struct HashReranker {
    seed: u64,
}

impl HashReranker {
    pub fn new(seed: u64) -> Self {
        HashReranker { seed }
    }
}

impl Reranker for HashReranker {
    fn id(&self) -> String {
        format!("hash-rerank:seed={}", self.seed)
    }

    fn score(&self, query: &str, doc_id: &str, _text: &str) -> f64 {
        let d = digest(&[&self.seed.to_le_bytes(), query.as_bytes(), doc_id.as_bytes()]);
        unit_from(&d) * 12.0 - 6.0
    }
}

/// Cosine similarity clamped to `[-1, 1]`; zero vectors score 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Lexical score: number of distinct query words present in the document.
pub fn term_overlap(query: &str, doc: &str) -> f64 {
    let q: std::collections::BTreeSet<String> = words(query).into_iter().collect();
    let d: std::collections::BTreeSet<String> = words(doc).into_iter().collect();
    q.intersection(&d).count() as f64
}
