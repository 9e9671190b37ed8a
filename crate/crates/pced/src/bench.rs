//! Time-to-first-token and end-to-end latency harness on the secret-code
//! dataset, comparing cache restore (PCED) against full prefill of the
//! concatenated documents.
//!
//! Blobs are prepared offline by the caller, ideally on a separate provider
//! instance so the timed one starts cold. Each repeat times PCED first, then
//! concatenation. TTFT runs from query dispatch until the first token is
//! chosen; end-to-end continues for `generated_tokens` further tokens.
//! Alongside wall-clock the provider's instrumented counters record how many
//! batched forward passes and per-session token evaluations were needed
//! before the first token.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use pced_core::decoder::Decoder;
use pced_core::synthetic::SyntheticInstance;
use pced_core::{DecodeConfig, ExpertInput, LogitProvider, TokenId, ToyModel};
use serde::Serialize;

use crate::error::{Error, Result};

/// Relevance assigned to the gold document; every other document gets
/// [`OTHER_RELEVANCE`].
pub const GOLD_RELEVANCE: f64 = 0.9;
pub const OTHER_RELEVANCE: f64 = 0.5;

/// A provider that counts its own work.
pub trait Instrumented {
    fn forward_passes(&self) -> u64;
    fn token_evals(&self) -> u64;
    fn reset_counters(&self);
}

impl Instrumented for ToyModel {
    fn forward_passes(&self) -> u64 {
        ToyModel::forward_passes(self)
    }

    fn token_evals(&self) -> u64 {
        ToyModel::token_evals(self)
    }

    fn reset_counters(&self) {
        ToyModel::reset_counters(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pced,
    Concat,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::Pced, Method::Concat];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Pced => "pced",
            Method::Concat => "concat",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pced" => Ok(Method::Pced),
            "concat" => Ok(Method::Concat),
            _ => Err(Error::Config(format!("unknown bench method {s:?} (pced, concat)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchConfig {
    pub n_docs: usize,
    pub doc_len: usize,
    /// Tokens generated after the first one.
    pub generated_tokens: usize,
    pub repeats: usize,
    pub warmup: bool,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub decode: DecodeConfig,
}

impl BenchConfig {
    pub fn new(n_docs: usize, doc_len: usize, seed: u64) -> Self {
        BenchConfig {
            n_docs,
            doc_len,
            generated_tokens: 0,
            repeats: 5,
            warmup: true,
            seed,
            methods: Method::ALL.to_vec(),
            decode: DecodeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodReport {
    pub method: Method,
    pub ttft_seconds: Vec<f64>,
    pub end_to_end_seconds: Vec<f64>,
    pub ttft_median: f64,
    pub end_to_end_median: f64,
    pub ttft_variance: f64,
    /// Batched forward passes from query dispatch to the first token.
    pub prefill_forward_passes: u64,
    /// Per-session token evaluations over the same span.
    pub prefill_token_evals: u64,
    /// Tokens produced by the untimed correctness run.
    pub answer: Vec<TokenId>,
    /// Whether `answer` starts with the secret code.
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub config: BenchConfig,
    pub provider: String,
    pub gold_index: usize,
    pub secret_code: Vec<TokenId>,
    pub methods: Vec<MethodReport>,
}

impl LatencyReport {
    pub fn method(&self, m: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|r| r.method == m)
    }
}

/// Relevance of each document in instance order.
pub fn relevances(instance: &SyntheticInstance) -> Vec<f64> {
    (0..instance.documents.len())
        .map(|i| if i == instance.gold_index { GOLD_RELEVANCE } else { OTHER_RELEVANCE })
        .collect()
}

/// Document indices in retrieval order: descending relevance, then index.
pub fn retrieval_order(instance: &SyntheticInstance) -> Vec<usize> {
    let r = relevances(instance);
    let mut order: Vec<usize> = (0..r.len()).collect();
    order.sort_by(|&a, &b| r[b].total_cmp(&r[a]).then(a.cmp(&b)));
    order
}

/// Offline cache preparation: one blob per document, in instance order.
pub fn prepare_blobs<P: LogitProvider>(instance: &SyntheticInstance, provider: &P) -> Result<Vec<Vec<u8>>> {
    instance
        .documents
        .iter()
        .map(|d| provider.prefill(d).map_err(|e| Error::Bench(format!("prefill failed: {e}"))))
        .collect()
}

/// The concatenated prefix: documents in retrieval order joined by the
/// separator, then the query.
pub fn concat_prefix(instance: &SyntheticInstance, separator: TokenId) -> Vec<TokenId> {
    let mut out = Vec::new();
    for (i, &d) in retrieval_order(instance).iter().enumerate() {
        if i > 0 {
            out.push(separator);
        }
        out.extend_from_slice(&instance.documents[d]);
    }
    out.extend_from_slice(&instance.query);
    out
}

struct Sample {
    ttft: f64,
    e2e: f64,
    passes: u64,
    evals: u64,
    tokens: Vec<TokenId>,
}

fn bench_err(what: &str) -> impl Fn(String) -> Error + '_ {
    move |e| Error::Bench(format!("{what}: {e}"))
}

fn run_pced<P: LogitProvider + Instrumented>(
    provider: &P,
    instance: &SyntheticInstance,
    blobs: &[Vec<u8>],
    decode: &DecodeConfig,
    total: usize,
) -> Result<Sample> {
    let rel = relevances(instance);
    let experts: Vec<ExpertInput<'_>> =
        retrieval_order(instance).into_iter().map(|i| ExpertInput { blob: &blobs[i], relevance: rel[i] }).collect();
    let config = DecodeConfig { max_tokens: total, stop_tokens: Some(Vec::new()), ..decode.clone() };
    let fail = bench_err("pced decode");
    provider.reset_counters();
    let t0 = Instant::now();
    let mut dec = Decoder::start(provider, &experts, &instance.query, config).map_err(|e| fail(e.to_string()))?;
    dec.select().map_err(|e| fail(e.to_string()))?;
    let ttft = t0.elapsed().as_secs_f64();
    let (passes, evals) = (provider.forward_passes(), provider.token_evals());
    while dec.step().map_err(|e| fail(e.to_string()))?.is_some() {}
    let e2e = if total <= 1 { ttft } else { t0.elapsed().as_secs_f64() };
    Ok(Sample { ttft, e2e, passes, evals, tokens: dec.finish().tokens })
}

fn run_concat<P: LogitProvider + Instrumented>(provider: &P, prefix: &[TokenId], total: usize) -> Result<Sample> {
    let fail = bench_err("concat decode");
    provider.reset_counters();
    let t0 = Instant::now();
    let mut session = provider.open_session(&[]).map_err(|e| fail(e.to_string()))?;
    let mut logits = provider.logits(&session).map_err(|e| fail(e.to_string()))?;
    for &t in prefix {
        logits = provider.step(&mut session, t).map_err(|e| fail(e.to_string()))?;
    }
    let mut tokens = Vec::with_capacity(total);
    let (mut ttft, mut passes, mut evals) = (0.0, 0, 0);
    while tokens.len() < total {
        let (tok, _) = logits.argmax().ok_or_else(|| fail("empty logits".into()))?;
        tokens.push(tok);
        if tokens.len() == 1 {
            ttft = t0.elapsed().as_secs_f64();
            passes = provider.forward_passes();
            evals = provider.token_evals();
        }
        if tokens.len() < total {
            logits = provider.step(&mut session, tok).map_err(|e| fail(e.to_string()))?;
        }
    }
    let e2e = if total <= 1 { ttft } else { t0.elapsed().as_secs_f64() };
    Ok(Sample { ttft, e2e, passes, evals, tokens })
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => 0.0,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

/// Population variance.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64
}

/// Runs the latency protocol. `blobs` come from [`prepare_blobs`].
///
/// With `warmup` set, one full discarded run of every method precedes the
/// timed repeats. After timing, an untimed run per method decodes
/// `max(code_len, 1 + generated_tokens)` tokens and checks the secret code.
pub fn run_latency<P: LogitProvider + Instrumented>(
    instance: &SyntheticInstance,
    blobs: &[Vec<u8>],
    provider: &P,
    config: &BenchConfig,
) -> Result<LatencyReport> {
    if blobs.len() != instance.documents.len() {
        return Err(Error::Bench(format!("{} blobs for {} documents", blobs.len(), instance.documents.len())));
    }
    if config.repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    if config.methods.is_empty() {
        return Err(Error::Config("no bench methods selected".into()));
    }
    config.decode.validate()?;
    let separator = pced_core::lm::TOY_SEP;
    let prefix = concat_prefix(instance, separator);
    let total = 1 + config.generated_tokens;
    let run = |m: Method, n: usize| match m {
        Method::Pced => run_pced(provider, instance, blobs, &config.decode, n),
        Method::Concat => run_concat(provider, &prefix, n),
    };

    if config.warmup {
        for &m in &config.methods {
            run(m, total)?;
        }
    }
    let mut samples: Vec<Vec<Sample>> = config.methods.iter().map(|_| Vec::new()).collect();
    for _ in 0..config.repeats {
        for (i, &m) in config.methods.iter().enumerate() {
            samples[i].push(run(m, total)?);
        }
    }

    let check_len = total.max(instance.secret_code.len());
    let mut methods = Vec::with_capacity(config.methods.len());
    for (i, &m) in config.methods.iter().enumerate() {
        let answer = run(m, check_len)?.tokens;
        let s = &samples[i];
        let ttft: Vec<f64> = s.iter().map(|x| x.ttft).collect();
        let e2e: Vec<f64> = s.iter().map(|x| x.e2e).collect();
        methods.push(MethodReport {
            method: m,
            ttft_median: median(&ttft),
            end_to_end_median: median(&e2e),
            ttft_variance: variance(&ttft),
            ttft_seconds: ttft,
            end_to_end_seconds: e2e,
            prefill_forward_passes: s[0].passes,
            prefill_token_evals: s[0].evals,
            correct: answer.starts_with(&instance.secret_code),
            answer,
        });
    }
    Ok(LatencyReport {
        config: config.clone(),
        provider: provider.id(),
        gold_index: instance.gold_index,
        secret_code: instance.secret_code.clone(),
        methods,
    })
}

/// One JSON line per method plus a trailing summary line.
pub fn report_jsonl(report: &LatencyReport, steps_only: bool) -> String {
    let mut out = String::new();
    for m in &report.methods {
        let mut v = serde_json::json!({
            "kind": "method",
            "n_docs": report.config.n_docs,
            "doc_len": report.config.doc_len,
            "method": m.method,
            "prefill_forward_passes": m.prefill_forward_passes,
            "prefill_token_evals": m.prefill_token_evals,
            "answer": m.answer,
            "correct": m.correct,
        });
        if !steps_only {
            v["ttft_seconds"] = serde_json::json!(m.ttft_seconds);
            v["end_to_end_seconds"] = serde_json::json!(m.end_to_end_seconds);
            v["ttft_median"] = serde_json::json!(m.ttft_median);
            v["end_to_end_median"] = serde_json::json!(m.end_to_end_median);
        }
        out.push_str(&v.to_string());
        out.push('\n');
    }
    out
}

/// Plain-text table over several reports (one row per N and method).
pub fn summary_table(reports: &[LatencyReport], steps_only: bool) -> String {
    let mut out = String::new();
    if steps_only {
        let _ = writeln!(
            out,
            "{:>6} {:>6} {:<7} {:>12} {:>12} {:>8} {:>8}",
            "N", "L", "method", "passes", "evals", "ratio", "correct"
        );
    } else {
        let _ = writeln!(
            out,
            "{:>6} {:>6} {:<7} {:>12} {:>12} {:>8} {:>12} {:>12} {:>8}",
            "N", "L", "method", "passes", "evals", "ratio", "ttft_ms", "e2e_ms", "correct"
        );
    }
    for r in reports {
        let base = r.method(Method::Pced).map(|m| m.prefill_forward_passes.max(1) as f64);
        for m in &r.methods {
            let ratio = base.map_or(String::from("-"), |b| format!("{:.1}x", m.prefill_forward_passes as f64 / b));
            let _ = write!(
                out,
                "{:>6} {:>6} {:<7} {:>12} {:>12} {:>8}",
                r.config.n_docs,
                r.config.doc_len,
                m.method.as_str(),
                m.prefill_forward_passes,
                m.prefill_token_evals,
                ratio
            );
            if !steps_only {
                let _ = write!(out, " {:>12.3} {:>12.3}", m.ttft_median * 1e3, m.end_to_end_median * 1e3);
            }
            let _ = writeln!(out, " {:>8}", m.correct);
        }
    }
    out
}
