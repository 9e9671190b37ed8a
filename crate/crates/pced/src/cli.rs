//! The `pced` command line.
//!
//! Exit codes: 0 success, 1 oracle or correctness mismatch, 2 usage or
//! configuration error, 3 store or IO error, 4 decode, provider or other
//! runtime error. Every command prints a `config: {...}` line with the fully
//! resolved configuration before its results.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pced_core::decoder::DEFAULT_GAMMA;
use pced_core::synthetic::{generate_with, SyntheticConfig};
use pced_core::{Aggregation, BetaPolicy, DecodeConfig, DecodeError, ScoreMode};
use serde_json::json;

use crate::bench::{self, BenchConfig, Method};
use crate::engine;
use crate::error::{Error, Result};
use crate::provider::ToySpec;
use crate::scorers::{Embedder, HashEmbedder, HashReranker, Reranker};
use crate::store::{BuildOptions, CorpusDoc, RawScores, Store};
use crate::sweeps::{self, Axis, PreparedSuite, Suite, SweepSpec};
use crate::text::Vocabulary;
use crate::trace::{self, TraceExpert, TraceHeader};

pub const EXIT_OK: i32 = 0;
pub const EXIT_MISMATCH: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_STORE: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "pced", version, about = "Parallel context-of-experts decoding over cached documents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode a corpus into a store of per-document caches.
    BuildCache(BuildCacheArgs),
    /// Retrieve, decode and print the answer (optionally writing a trace).
    Query(QueryArgs),
    /// TTFT / end-to-end latency on the synthetic secret-code dataset.
    Bench(BenchArgs),
    /// Run an ablation sweep over a scenario suite.
    Sweep(SweepArgs),
    /// Render a trace file as an expert-usage chart.
    TracePlot(TracePlotArgs),
}

#[derive(Debug, Args)]
pub struct BuildCacheArgs {
    /// Directory of `*.txt` files (id = file stem) or a JSONL file of
    /// `{"id", "text", "scores"?}` records.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, default_value = "toy")]
    pub provider: String,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Text encoded ahead of every document inside its cache.
    #[arg(long, default_value = "")]
    pub system: String,
    /// Do not append the stop token after each document.
    #[arg(long)]
    pub no_terminator: bool,
    #[arg(long, default_value_t = HashEmbedder::DEFAULT_DIM)]
    pub embedding_dim: usize,
}

#[derive(Debug, Args, Clone)]
pub struct DecodeArgs {
    #[arg(long, default_value_t = DEFAULT_GAMMA, allow_hyphen_values = true)]
    pub gamma: f64,
    /// Fixed contrast strength; implies `--beta-policy fixed` (0 means zero).
    #[arg(long, allow_hyphen_values = true)]
    pub beta: Option<f64>,
    /// dynamic, dynamic-global, zero or fixed.
    #[arg(long)]
    pub beta_policy: Option<String>,
    /// max, mixture or product.
    #[arg(long, default_value = "max")]
    pub aggregation: String,
    #[arg(long, default_value_t = 32)]
    pub max_tokens: usize,
}

impl DecodeArgs {
    pub fn to_config(&self) -> Result<DecodeConfig> {
        let beta_policy = match (self.beta_policy.as_deref(), self.beta) {
            (None, None) => BetaPolicy::DynamicFirstToken,
            (None | Some("fixed"), Some(b)) => {
                if !b.is_finite() || b < 0.0 {
                    return Err(Error::Config("--beta must be finite and >= 0".into()));
                }
                if b == 0.0 {
                    BetaPolicy::Zero
                } else {
                    BetaPolicy::Fixed(b)
                }
            }
            (Some("fixed"), None) => return Err(Error::Config("--beta-policy fixed needs --beta".into())),
            (Some(p), None) => p.parse::<BetaPolicy>()?,
            (Some(_), Some(_)) => return Err(Error::Config("--beta only combines with --beta-policy fixed".into())),
        };
        let config = DecodeConfig {
            gamma: self.gamma,
            beta_policy,
            aggregation: self.aggregation.parse::<Aggregation>()?,
            max_tokens: self.max_tokens,
            ..DecodeConfig::default()
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub question: String,
    /// Defaults to the provider recorded in the store manifest.
    #[arg(long)]
    pub provider: Option<String>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long, default_value_t = 8)]
    pub topk: usize,
    /// Retrieval mode: dense, colbert or sparse.
    #[arg(long, default_value = "dense")]
    pub mode: String,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    /// Query template; `{question}` is replaced by the question.
    #[arg(long, default_value = "{question}")]
    pub question_template: String,
    /// Decode the top document alone and compare with plain greedy decoding
    /// of its cached tokens plus the query (needs `--beta 0 --gamma 0`).
    #[arg(long)]
    pub oracle_single: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated document counts.
    #[arg(long, default_value = "4,8,16,32", value_delimiter = ',')]
    pub n_docs: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    pub doc_len: usize,
    /// Tokens generated after the first one.
    #[arg(long, default_value_t = 0)]
    pub generated_tokens: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Skip the discarded warmup run.
    #[arg(long)]
    pub no_warmup: bool,
    /// Report only instrumented step counts (no wall-clock).
    #[arg(long)]
    pub steps: bool,
    /// Comma-separated subset of pced, concat.
    #[arg(long, default_value = "pced,concat", value_delimiter = ',')]
    pub methods: Vec<String>,
    #[arg(long, default_value = "toy")]
    pub provider: String,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Write JSONL records here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Suite file, or `multihop` / `single` for the bundled suites.
    #[arg(long)]
    pub scenario: String,
    /// beta, gamma, components, aggregation or topk.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated axis values; defaults to the axis grid.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<String>>,
    #[arg(long, default_value = "toy")]
    pub provider: String,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long, default_value_t = sweeps::DEFAULT_TOPK)]
    pub topk: usize,
    /// Retrieval mode used when the suite names none.
    #[arg(long, default_value = "dense")]
    pub mode: String,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub repetitions: usize,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Write JSONL records here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TracePlotArgs {
    /// Trace file written by `query --trace-out`.
    pub trace: PathBuf,
}

/// Maps an error to its exit-code class.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Synthetic(_) => EXIT_USAGE,
        Error::Decode(DecodeError::InvalidConfig(_)) => EXIT_USAGE,
        Error::Io { .. }
        | Error::Json { .. }
        | Error::DuplicateDocument(_)
        | Error::BuildFailed { .. }
        | Error::Corrupt(_)
        | Error::NotFound(_)
        | Error::DimensionMismatch { .. } => EXIT_STORE,
        Error::Score(_) | Error::Provider(_) | Error::Decode(_) | Error::Bench(_) => EXIT_RUNTIME,
    }
}

/// Parses `args` (program name first) and runs the command, writing to the
/// given streams. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    let result = match cli.command {
        Command::BuildCache(a) => build_cache(&a, out),
        Command::Query(a) => query(&a, out),
        Command::Bench(a) => run_bench(&a, out),
        Command::Sweep(a) => run_sweep(&a, out),
        Command::TracePlot(a) => trace_plot(&a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(args, &mut stdout.lock(), &mut stderr.lock())
}

fn io_out(e: std::io::Error) -> Error {
    Error::Io { path: PathBuf::from("<stdout>"), source: e }
}

fn echo(out: &mut dyn std::io::Write, config: &serde_json::Value) -> Result<()> {
    writeln!(out, "config: {config}").map_err(io_out)
}

fn parse_mode(s: &str) -> Result<ScoreMode> {
    let m: ScoreMode = s.parse()?;
    if m == ScoreMode::Reranker {
        return Err(Error::Config("--mode must be dense, colbert or sparse".into()));
    }
    Ok(m)
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusRecord {
    id: String,
    text: String,
    #[serde(default)]
    scores: Option<RawScores>,
}

/// Reads a corpus directory (`*.txt`, sorted by name) or a JSONL file.
pub fn load_corpus(path: &Path) -> Result<Vec<CorpusDoc>> {
    let meta = fs::metadata(path).map_err(Error::io(path))?;
    if meta.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(Error::io(path))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "txt"))
            .collect();
        files.sort();
        files
            .into_iter()
            .map(|p| {
                let text = fs::read_to_string(&p).map_err(Error::io(&p))?;
                let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                Ok(CorpusDoc { id, text: text.trim().to_string(), raw_scores: None })
            })
            .collect()
    } else {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let r: CorpusRecord = serde_json::from_str(l).map_err(Error::json(path))?;
                Ok(CorpusDoc { id: r.id, text: r.text, raw_scores: r.scores })
            })
            .collect()
    }
}

fn build_cache(a: &BuildCacheArgs, out: &mut dyn std::io::Write) -> Result<i32> {
    if a.embedding_dim == 0 {
        return Err(Error::Config("--embedding-dim must be at least 1".into()));
    }
    let spec: ToySpec = a.provider.parse()?;
    let corpus = load_corpus(&a.corpus)?;
    let vocab = Vocabulary::build(corpus.iter().map(|d| d.text.as_str()).chain([a.system.as_str()]));
    let provider = spec.build(vocab.len(), a.seed)?;
    let embedder = HashEmbedder::new(a.embedding_dim);
    let options = BuildOptions { prompt_prefix: a.system.clone(), terminate_documents: !a.no_terminator };
    echo(
        out,
        &json!({
            "command": "build-cache",
            "corpus": a.corpus,
            "store": a.store,
            "provider": provider.config().id(),
            "seed": a.seed,
            "system": a.system,
            "document_terminator": options.terminate_documents,
            "embedder": embedder.id(),
        }),
    )?;
    let store = Store::build(&corpus, &vocab, &embedder, &provider, &options)?;
    store.persist(&a.store)?;
    writeln!(out, "built {} entries ({} words) into {}", store.len(), vocab.len(), a.store.display())
        .map_err(io_out)?;
    Ok(EXIT_OK)
}

fn query(a: &QueryArgs, out: &mut dyn std::io::Write) -> Result<i32> {
    let mut config = a.decode.to_config()?;
    let mode = parse_mode(&a.mode)?;
    if a.topk == 0 {
        return Err(Error::Config("--topk must be at least 1".into()));
    }
    if a.oracle_single {
        let zero_beta = matches!(config.beta_policy, BetaPolicy::Zero | BetaPolicy::Fixed(0.0));
        if !zero_beta || config.gamma != 0.0 {
            return Err(Error::Config("--oracle-single needs --beta 0 --gamma 0".into()));
        }
    }
    let store = Store::load(&a.store)?;
    let manifest = store.manifest();
    let spec: ToySpec = a.provider.as_deref().unwrap_or(&manifest.provider).parse()?;
    let provider = spec.build(store.vocabulary().len(), a.seed)?;
    let embedder = HashEmbedder::new(manifest.embedding_dim.max(1));
    if embedder.id() != manifest.embedder {
        return Err(Error::Config(format!("store was embedded with {:?}", manifest.embedder)));
    }
    let reranker = HashReranker::new(a.seed);
    let query_text = a.question_template.replace("{question}", &a.question);
    let topk = if a.oracle_single { 1 } else { a.topk };
    config.stop_tokens = None;
    let echo_value = json!({
        "command": "query",
        "store": a.store,
        "provider": provider.config().id(),
        "seed": a.seed,
        "mode": mode,
        "topk": topk,
        "question": a.question,
        "query": query_text,
        "reranker": reranker.id(),
        "decode": config,
        "oracle_single": a.oracle_single,
    });
    echo(out, &echo_value)?;

    let retrieval = store.retrieve(&embedder.embed(&a.question), &a.question, topk, mode, &reranker)?;
    if retrieval.is_empty() {
        return Err(Error::Config("store is empty; nothing to decode".into()));
    }
    for (k, r) in retrieval.entries.iter().enumerate() {
        writeln!(
            out,
            "expert {k}: {} retrieval={:.6} reranker={:.6} fused={:.6}",
            r.doc_id, r.score.retrieval, r.score.reranker, r.score.fused
        )
        .map_err(io_out)?;
    }
    let vocab = store.vocabulary();
    let query_tokens = vocab.encode(&query_text);
    let output = engine::decode_retrieved(&store, &retrieval, &query_tokens, config.clone(), &provider)?;
    writeln!(out, "answer: {}", vocab.decode(&output.tokens)).map_err(io_out)?;

    if let Some(path) = &a.trace_out {
        let doc_ids: Vec<String> = retrieval.entries.iter().map(|r| r.doc_id.clone()).collect();
        let header = TraceHeader {
            config: echo_value.clone(),
            query: query_text.clone(),
            experts: retrieval
                .entries
                .iter()
                .map(|r| TraceExpert { doc_id: r.doc_id.clone(), fused: r.score.fused })
                .collect(),
        };
        let steps = trace::step_records(&output.trace, &doc_ids, vocab);
        let file = fs::File::create(path).map_err(Error::io(path))?;
        let mut w = std::io::BufWriter::new(file);
        trace::write_trace(&mut w, &header, &steps).map_err(Error::io(path))?;
        writeln!(out, "trace: {} steps written to {}", steps.len(), path.display()).map_err(io_out)?;
    }

    if a.oracle_single {
        let reference =
            engine::greedy_reference(&store, retrieval.entries[0].index, &query_tokens, config.max_tokens, &provider)?;
        if reference == output.tokens {
            writeln!(out, "oracle: match ({} tokens)", reference.len()).map_err(io_out)?;
        } else {
            writeln!(out, "oracle: MISMATCH greedy={:?} pced={:?}", reference, output.tokens).map_err(io_out)?;
            return Ok(EXIT_MISMATCH);
        }
    }
    Ok(EXIT_OK)
}

fn run_bench(a: &BenchArgs, out: &mut dyn std::io::Write) -> Result<i32> {
    let decode = a.decode.to_config()?;
    let spec: ToySpec = a.provider.parse()?;
    let methods = a.methods.iter().map(|m| m.trim().parse::<Method>()).collect::<Result<Vec<_>>>()?;
    if a.n_docs.is_empty() || a.n_docs.iter().any(|&n| n == 0 || n > 128) {
        return Err(Error::Config("--n-docs values must lie in 1..=128".into()));
    }
    let vocab = spec.vocab.unwrap_or(SyntheticConfig::DEFAULT_VOCAB);
    let provider_id = spec.resolve(vocab, a.seed)?.id();
    echo(
        out,
        &json!({
            "command": "bench",
            "provider": provider_id,
            "seed": a.seed,
            "n_docs": a.n_docs,
            "doc_len": a.doc_len,
            "generated_tokens": a.generated_tokens,
            "repeats": a.repeats,
            "warmup": !a.no_warmup,
            "steps_only": a.steps,
            "methods": methods,
            "decode": decode,
        }),
    )?;
    let mut reports = Vec::new();
    let mut jsonl = String::new();
    for &n in &a.n_docs {
        let instance =
            generate_with(SyntheticConfig { vocab_size: vocab, ..SyntheticConfig::new(n, a.doc_len, a.seed) })?;
        let offline = spec.build(vocab, a.seed)?;
        let blobs = bench::prepare_blobs(&instance, &offline)?;
        let timed = spec.build(vocab, a.seed)?;
        let config = BenchConfig {
            generated_tokens: a.generated_tokens,
            repeats: a.repeats,
            warmup: !a.no_warmup,
            methods: methods.clone(),
            decode: decode.clone(),
            ..BenchConfig::new(n, a.doc_len, a.seed)
        };
        let report = bench::run_latency(&instance, &blobs, &timed, &config)?;
        jsonl.push_str(&bench::report_jsonl(&report, a.steps));
        reports.push(report);
    }
    out.write_all(bench::summary_table(&reports, a.steps).as_bytes()).map_err(io_out)?;
    if let Some(path) = &a.out {
        fs::write(path, &jsonl).map_err(Error::io(path))?;
    }
    let failed: Vec<String> = reports
        .iter()
        .flat_map(|r| {
            r.methods.iter().filter(|m| !m.correct).map(move |m| format!("{}@N={}", m.method.as_str(), r.config.n_docs))
        })
        .collect();
    if failed.is_empty() {
        Ok(EXIT_OK)
    } else {
        writeln!(out, "correctness gate failed: {}", failed.join(", ")).map_err(io_out)?;
        Ok(EXIT_MISMATCH)
    }
}

fn run_sweep(a: &SweepArgs, out: &mut dyn std::io::Write) -> Result<i32> {
    let axis: Axis = a.axis.parse()?;
    let mut spec = SweepSpec::new(axis, a.values.as_deref())?;
    spec.base = a.decode.to_config()?;
    spec.topk = a.topk;
    spec.mode = parse_mode(&a.mode)?;
    spec.seed = a.seed;
    spec.repetitions = a.repetitions;
    spec.workers = a.workers;
    spec.validate()?;
    let provider: ToySpec = a.provider.parse()?;
    let suite = Suite::load(&a.scenario)?;
    let prepared = PreparedSuite::build(suite, &provider, a.seed)?;
    echo(
        out,
        &json!({
            "command": "sweep",
            "scenario": a.scenario,
            "suite": prepared.suite.suite,
            "provider": prepared.provider.config().id(),
            "spec": spec,
            "values": spec.values.iter().map(|v| v.label()).collect::<Vec<_>>(),
        }),
    )?;
    let result = sweeps::run_sweep(&spec, &prepared)?;
    out.write_all(sweeps::render_table(&result).as_bytes()).map_err(io_out)?;
    if let Some(path) = &a.out {
        fs::write(path, sweeps::render_jsonl(&result)).map_err(Error::io(path))?;
    }
    Ok(EXIT_OK)
}

fn trace_plot(a: &TracePlotArgs, out: &mut dyn std::io::Write) -> Result<i32> {
    let file = fs::File::open(&a.trace).map_err(Error::io(&a.trace))?;
    let t = trace::read_trace(std::io::BufReader::new(file), &a.trace.display().to_string())?;
    echo(out, &json!({"command": "trace-plot", "trace": a.trace, "steps": t.steps.len()}))?;
    out.write_all(trace::render_plot(&t).as_bytes()).map_err(io_out)?;
    Ok(EXIT_OK)
}
