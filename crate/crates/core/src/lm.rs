//! Logit-provider contract and the deterministic toy model.
//!
//! A provider owns the model; sessions own the evolving per-stream cache
//! state. Sessions are opened from opaque cache blobs produced by
//! [`LogitProvider::prefill`] (an empty blob opens the amateur stream) and
//! advanced one token at a time by [`LogitProvider::step_batch`], which feeds
//! the same token to every session of the batch in one forward pass.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::sync::atomic::{AtomicU64, Ordering};

use once_cell::race::OnceBox;

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq)]
pub enum ProviderError {
    /// Blob was written by a different provider or provider configuration.
    VersionMismatch {
        expected: String,
        found: String,
    },
    MalformedBlob(&'static str),
    TokenOutOfVocabulary {
        token: TokenId,
        vocab_size: usize,
    },
    NonFiniteLogit {
        index: usize,
    },
    /// Failure reported by the model backend itself.
    Backend(String),
}

impl fmt::Display for ProviderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProviderError::VersionMismatch { expected, found } => {
                write!(f, "cache blob version mismatch: provider is {expected}, blob is {found}")
            }
            ProviderError::MalformedBlob(what) => write!(f, "malformed cache blob: {what}"),
            ProviderError::TokenOutOfVocabulary { token, vocab_size } => {
                write!(f, "token {token} outside vocabulary of size {vocab_size}")
            }
            ProviderError::NonFiniteLogit { index } => write!(f, "non-finite logit at index {index}"),
            ProviderError::Backend(msg) => write!(f, "provider backend failure: {msg}"),
        }
    }
}

impl core::error::Error for ProviderError {}

/// Raw (pre-softmax) scores over the vocabulary. All entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self, ProviderError> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(ProviderError::NonFiniteLogit { index });
        }
        Ok(LogitVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Highest-scoring token; ties go to the lowest id.
    pub fn argmax(&self) -> Option<(TokenId, f64)> {
        argmax(&self.0)
    }
}

impl From<LogitVector> for Vec<f64> {
    fn from(v: LogitVector) -> Self {
        v.0
    }
}

pub(crate) fn argmax(values: &[f64]) -> Option<(TokenId, f64)> {
    let mut best: Option<(TokenId, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i as TokenId, v)),
        }
    }
    best
}

/// Read-only view of a decoding stream.
pub trait ProviderSession {
    fn session_id(&self) -> u64;
    /// Total tokens absorbed, including the restored prefix.
    fn position(&self) -> usize;
    /// Tokens absorbed since the session was opened.
    fn history(&self) -> &[TokenId];
}

/// The model abstraction the decoder drives.
///
/// Implementations must be deterministic: equal blobs fed equal tokens give
/// bitwise-equal logits, and `step_batch` over k sessions must equal k
/// independent single-session steps.
pub trait LogitProvider {
    type Session: ProviderSession + Clone;

    /// Identifier written into cache blobs and store manifests.
    fn id(&self) -> String;
    fn vocab_size(&self) -> usize;
    /// Provider-defined end-of-sequence ids.
    fn stop_tokens(&self) -> &[TokenId];

    /// Restores a session from a cache blob; an empty blob yields a fresh
    /// session with no context (the amateur).
    fn open_session(&self, blob: &[u8]) -> Result<Self::Session, ProviderError>;

    /// Next-token logits for the session's current state.
    fn logits(&self, session: &Self::Session) -> Result<LogitVector, ProviderError>;

    /// Feeds `token` to every session in one batched forward pass and returns
    /// the resulting next-token logits, one vector per session.
    fn step_batch(&self, sessions: &mut [Self::Session], token: TokenId) -> Result<Vec<LogitVector>, ProviderError>;

    /// Encodes `tokens` from an empty state and returns the cache blob.
    fn prefill(&self, tokens: &[TokenId]) -> Result<Vec<u8>, ProviderError>;

    fn step(&self, session: &mut Self::Session, token: TokenId) -> Result<LogitVector, ProviderError> {
        let mut out = self.step_batch(core::slice::from_mut(session), token)?;
        out.pop().ok_or(ProviderError::Backend(String::from("empty batch result")))
    }
}

/// End-of-sequence id reserved by the toy model.
pub const TOY_EOS: TokenId = 0;
/// Separator id used between concatenated documents.
pub const TOY_SEP: TokenId = 1;
/// Unknown-word id.
pub const TOY_UNK: TokenId = 2;
/// First id available for ordinary tokens.
pub const TOY_FIRST_FREE: TokenId = 3;

// The lazily built bigram table holds (V + 1) * V entries; above this many
// the base logits are hashed on the fly.
const TABLE_LIMIT: usize = 1 << 21;

const BLOB_MAGIC: &[u8; 8] = b"PCEDTOY\0";
const BLOB_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ToyConfig {
    pub vocab_size: usize,
    /// Number of trailing tokens the base logits condition on.
    pub order: usize,
    pub seed: u64,
    /// Added once to every token present in the absorbed prefix.
    pub presence_bonus: f64,
    /// Added per observed occurrence of `last token -> v` in the absorbed prefix.
    pub copy_bonus: f64,
}

impl ToyConfig {
    pub const DEFAULT_PRESENCE_BONUS: f64 = 1.0;
    pub const DEFAULT_COPY_BONUS: f64 = 4.0;

    pub fn new(vocab_size: usize, order: usize, seed: u64) -> Self {
        ToyConfig {
            vocab_size,
            order,
            seed,
            presence_bonus: Self::DEFAULT_PRESENCE_BONUS,
            copy_bonus: Self::DEFAULT_COPY_BONUS,
        }
    }

    pub fn id(&self) -> String {
        format!(
            "toy-v{BLOB_FORMAT}:vocab={},order={},seed={},presence={},copy={}",
            self.vocab_size, self.order, self.seed, self.presence_bonus, self.copy_bonus
        )
    }
}

/// Deterministic smoothed n-gram stand-in for a language model.
///
/// Logits for token `v` are the sum of
///
/// * a seeded pseudo-random value in `[-1, 1)` keyed by the previous token
///   and `v`, plus geometrically decaying hashed terms for the earlier
///   tokens of the `order` window;
/// * `presence_bonus` if `v` occurs anywhere in the absorbed prefix;
/// * `copy_bonus` times the number of times `v` followed the current last
///   token in the absorbed prefix.
///
/// The last two terms are what make a document's cache shift the
/// distribution: a session restored from a document blob prefers to continue
/// the way the document did.
///
/// Every absorbed token counts as one token evaluation and every call to
/// [`LogitProvider::step_batch`] as one forward pass; both counters are
/// exposed for latency proxies.
#[derive(Debug)]
pub struct ToyModel {
    config: ToyConfig,
    table: OnceBox<Vec<f64>>,
    next_session: AtomicU64,
    forward_passes: AtomicU64,
    token_evals: AtomicU64,
    stop: [TokenId; 1],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySession {
    id: u64,
    position: usize,
    window: Vec<TokenId>,
    presence: BTreeMap<TokenId, u32>,
    transitions: BTreeMap<(TokenId, TokenId), u32>,
    history: Vec<TokenId>,
}

impl ProviderSession for ToySession {
    fn session_id(&self) -> u64 {
        self.id
    }

    fn position(&self) -> usize {
        self.position
    }

    fn history(&self) -> &[TokenId] {
        &self.history
    }
}

impl ToySession {
    /// Absorbed-prefix token multiset.
    pub fn presence(&self) -> &BTreeMap<TokenId, u32> {
        &self.presence
    }

    pub fn window(&self) -> &[TokenId] {
        &self.window
    }

    fn absorb(&mut self, token: TokenId, order: usize) {
        if let Some(&last) = self.window.last() {
            *self.transitions.entry((last, token)).or_insert(0) += 1;
        }
        *self.presence.entry(token).or_insert(0) += 1;
        self.window.push(token);
        if self.window.len() > order {
            self.window.remove(0);
        }
        self.position += 1;
        self.history.push(token);
    }
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded value in `[-1, 1)` for (lag, context token, candidate).
#[inline]
fn unit_hash(seed: u64, lag: u64, context: u64, candidate: u64) -> f64 {
    let h = mix64(mix64(mix64(seed ^ lag.wrapping_mul(0xD6E8_FEB8_6659_FD93)) ^ context) ^ candidate);
    ((h >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
}

impl ToyModel {
    /// Panics if `vocab_size < 2` or `order == 0`.
    pub fn new(config: ToyConfig) -> Self {
        assert!(config.vocab_size >= 2, "toy model needs at least two tokens");
        assert!(config.order >= 1, "toy model order must be at least 1");
        ToyModel {
            config,
            table: OnceBox::new(),
            next_session: AtomicU64::new(0),
            forward_passes: AtomicU64::new(0),
            token_evals: AtomicU64::new(0),
            stop: [TOY_EOS],
        }
    }

    /// Convenience constructor with default bonuses.
    pub fn with_params(vocab_size: usize, order: usize, seed: u64) -> Self {
        Self::new(ToyConfig::new(vocab_size, order, seed))
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    /// Batched forward passes executed so far (one per `step_batch`).
    pub fn forward_passes(&self) -> u64 {
        self.forward_passes.load(Ordering::Relaxed)
    }

    /// Per-session token evaluations executed so far.
    pub fn token_evals(&self) -> u64 {
        self.token_evals.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.forward_passes.store(0, Ordering::Relaxed);
        self.token_evals.store(0, Ordering::Relaxed);
    }

    /// Whether the one-time bigram table has been built.
    pub fn is_warm(&self) -> bool {
        self.table.get().is_some()
    }

    fn new_session(&self) -> ToySession {
        ToySession {
            id: self.next_session.fetch_add(1, Ordering::Relaxed),
            position: 0,
            window: Vec::new(),
            presence: BTreeMap::new(),
            transitions: BTreeMap::new(),
            history: Vec::new(),
        }
    }

    fn bigram_row(&self, prev: Option<TokenId>) -> u64 {
        // Row V stands for "no previous token".
        prev.map_or(self.config.vocab_size as u64, u64::from)
    }

    fn table(&self) -> Option<&[f64]> {
        let v = self.config.vocab_size;
        if (v + 1) * v > TABLE_LIMIT {
            return None;
        }
        let seed = self.config.seed;
        let t = self.table.get_or_init(|| {
            let mut t = Vec::with_capacity((v + 1) * v);
            for row in 0..=v as u64 {
                for col in 0..v as u64 {
                    t.push(unit_hash(seed, 1, row, col));
                }
            }
            alloc::boxed::Box::new(t)
        });
        Some(t.as_slice())
    }

    fn compute_logits(&self, s: &ToySession) -> Vec<f64> {
        let v = self.config.vocab_size;
        let seed = self.config.seed;
        let last = s.window.last().copied();
        let row = self.bigram_row(last);
        let mut out = match self.table() {
            Some(t) => {
                let start = row as usize * v;
                t[start..start + v].to_vec()
            }
            None => (0..v as u64).map(|c| unit_hash(seed, 1, row, c)).collect(),
        };
        let mut scale = 1.0;
        for (lag, &tok) in s.window.iter().rev().enumerate().skip(1) {
            scale *= 0.5;
            for (c, o) in out.iter_mut().enumerate() {
                *o += scale * unit_hash(seed, lag as u64 + 1, u64::from(tok), c as u64);
            }
        }
        for (&tok, &count) in &s.presence {
            if count > 0 {
                out[tok as usize] += self.config.presence_bonus;
            }
        }
        if let Some(prev) = last {
            for (&(_, next), &count) in s.transitions.range((prev, 0)..=(prev, TokenId::MAX)) {
                out[next as usize] += self.config.copy_bonus * f64::from(count);
            }
        }
        out
    }

    fn check_token(&self, token: TokenId) -> Result<(), ProviderError> {
        if (token as usize) < self.config.vocab_size {
            Ok(())
        } else {
            Err(ProviderError::TokenOutOfVocabulary { token, vocab_size: self.config.vocab_size })
        }
    }

    /// Serializes a session's restorable state.
    ///
    /// Layout (all integers little-endian): magic `PCEDTOY\0`, format `u32`,
    /// vocab `u32`, order `u32`, seed `u64`, presence bonus `f64`, copy
    /// bonus `f64`, position `u64`, then three length-prefixed (`u32`)
    /// sections: the order window (`u32` ids), the absorbed-prefix multiset
    /// (`u32` id, `u32` count) and the transition counts (`u32` previous,
    /// `u32` next, `u32` count).
    pub fn encode_session(&self, s: &ToySession) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(64 + 4 * s.window.len() + 8 * s.presence.len() + 12 * s.transitions.len());
        out.extend_from_slice(BLOB_MAGIC);
        out.extend_from_slice(&BLOB_FORMAT.to_le_bytes());
        out.extend_from_slice(&(c.vocab_size as u32).to_le_bytes());
        out.extend_from_slice(&(c.order as u32).to_le_bytes());
        out.extend_from_slice(&c.seed.to_le_bytes());
        out.extend_from_slice(&c.presence_bonus.to_bits().to_le_bytes());
        out.extend_from_slice(&c.copy_bonus.to_bits().to_le_bytes());
        out.extend_from_slice(&(s.position as u64).to_le_bytes());
        out.extend_from_slice(&(s.window.len() as u32).to_le_bytes());
        for t in &s.window {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out.extend_from_slice(&(s.presence.len() as u32).to_le_bytes());
        for (t, n) in &s.presence {
            out.extend_from_slice(&t.to_le_bytes());
            out.extend_from_slice(&n.to_le_bytes());
        }
        out.extend_from_slice(&(s.transitions.len() as u32).to_le_bytes());
        for ((a, b), n) in &s.transitions {
            out.extend_from_slice(&a.to_le_bytes());
            out.extend_from_slice(&b.to_le_bytes());
            out.extend_from_slice(&n.to_le_bytes());
        }
        out
    }

    fn decode_session(&self, blob: &[u8]) -> Result<ToySession, ProviderError> {
        let mut r = Reader { buf: blob };
        if r.take(8)? != BLOB_MAGIC {
            return Err(ProviderError::MalformedBlob("bad magic"));
        }
        let format = r.u32()?;
        let vocab = r.u32()?;
        let order = r.u32()?;
        let seed = r.u64()?;
        let presence_bonus = f64::from_bits(r.u64()?);
        let copy_bonus = f64::from_bits(r.u64()?);
        let found = ToyConfig { vocab_size: vocab as usize, order: order as usize, seed, presence_bonus, copy_bonus };
        if format != BLOB_FORMAT || found != self.config {
            let found = if format == BLOB_FORMAT { found.id() } else { format!("toy-v{format}") };
            return Err(ProviderError::VersionMismatch { expected: self.id(), found });
        }
        let mut s = self.new_session();
        s.position = r.u64()? as usize;
        let n = r.u32()? as usize;
        if n > self.config.order {
            return Err(ProviderError::MalformedBlob("window longer than order"));
        }
        for _ in 0..n {
            let t = r.u32()?;
            self.check_token(t).map_err(|_| ProviderError::MalformedBlob("window token out of range"))?;
            s.window.push(t);
        }
        let n = r.u32()? as usize;
        for _ in 0..n {
            let t = r.u32()?;
            self.check_token(t).map_err(|_| ProviderError::MalformedBlob("prefix token out of range"))?;
            s.presence.insert(t, r.u32()?);
        }
        let n = r.u32()? as usize;
        for _ in 0..n {
            let a = r.u32()?;
            let b = r.u32()?;
            if self.check_token(a).is_err() || self.check_token(b).is_err() {
                return Err(ProviderError::MalformedBlob("transition token out of range"));
            }
            s.transitions.insert((a, b), r.u32()?);
        }
        if !r.buf.is_empty() {
            return Err(ProviderError::MalformedBlob("trailing bytes"));
        }
        Ok(s)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProviderError> {
        if self.buf.len() < n {
            return Err(ProviderError::MalformedBlob("truncated"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, ProviderError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, ProviderError> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

impl LogitProvider for ToyModel {
    type Session = ToySession;

    fn id(&self) -> String {
        self.config.id()
    }

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn stop_tokens(&self) -> &[TokenId] {
        &self.stop
    }

    fn open_session(&self, blob: &[u8]) -> Result<ToySession, ProviderError> {
        if blob.is_empty() {
            Ok(self.new_session())
        } else {
            self.decode_session(blob)
        }
    }

    fn logits(&self, session: &ToySession) -> Result<LogitVector, ProviderError> {
        Ok(LogitVector(self.compute_logits(session)))
    }

    fn step_batch(&self, sessions: &mut [ToySession], token: TokenId) -> Result<Vec<LogitVector>, ProviderError> {
        self.check_token(token)?;
        let order = self.config.order;
        let out = sessions
            .iter_mut()
            .map(|s| {
                s.absorb(token, order);
                LogitVector(self.compute_logits(s))
            })
            .collect();
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        self.token_evals.fetch_add(sessions.len() as u64, Ordering::Relaxed);
        Ok(out)
    }

    fn prefill(&self, tokens: &[TokenId]) -> Result<Vec<u8>, ProviderError> {
        let mut s = self.new_session();
        for &t in tokens {
            self.step(&mut s, t)?;
        }
        Ok(self.encode_session(&s))
    }
}

/// Plain greedy decoding on a single session: feeds `prompt`, then emits the
/// argmax token until a stop token or `max_tokens`.
///
/// This is the reference the parallel decoder must reproduce with one
/// expert and no calibration.
pub fn greedy_decode<P: LogitProvider>(
    provider: &P,
    blob: &[u8],
    prompt: &[TokenId],
    max_tokens: usize,
) -> Result<Vec<TokenId>, ProviderError> {
    let mut session = provider.open_session(blob)?;
    let mut logits = provider.logits(&session)?;
    for &t in prompt {
        logits = provider.step(&mut session, t)?;
    }
    let mut out = Vec::new();
    while out.len() < max_tokens {
        let (tok, _) = logits.argmax().ok_or(ProviderError::Backend(String::from("empty logits")))?;
        out.push(tok);
        if provider.stop_tokens().contains(&tok) {
            break;
        }
        logits = provider.step(&mut session, tok)?;
    }
    Ok(out)
}

/// Logits of an empty session fed `tokens`, without going through a blob.
pub fn logits_after<P: LogitProvider>(provider: &P, tokens: &[TokenId]) -> Result<LogitVector, ProviderError> {
    let mut s = provider.open_session(&[])?;
    let mut logits = provider.logits(&s)?;
    for &t in tokens {
        logits = provider.step(&mut s, t)?;
    }
    Ok(logits)
}

#[allow(dead_code)]
fn _assert_sync() {
    fn is_sync<T: Sync + Send>() {}
    is_sync::<ToyModel>();
}
