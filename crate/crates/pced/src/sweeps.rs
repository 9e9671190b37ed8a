//! Ablation sweeps over declarative scenario suites.
//!
//! A suite is a JSON file:
//!
//! ```json
//! {
//!   "suite": "multihop",
//!   "description": "free text",
//!   "mode": "dense",
//!   "scenarios": [
//!     {
//!       "id": "nolan",
//!       "query": "inception director birth year :",
//!       "gold": "christopher nolan was born in 1970",
//!       "documents": [
//!         {"id": "a", "text": "...", "scores": {"dense": 0.9, "reranker": 3.0}}
//!       ]
//!     }
//!   ]
//! }
//! ```
//!
//! `mode` and per-document `scores` are optional; missing scores fall back
//! to the built-in scorers. Each scenario gets its own store, all scenarios
//! share one vocabulary and one toy provider.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use pced_core::decoder::DEFAULT_GAMMA;
use pced_core::{Aggregation, BetaPolicy, DecodeConfig, ScoreMode, ToyModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::decode_retrieved;
use crate::error::{Error, Result};
use crate::provider::ToySpec;
use crate::scorers::{Embedder, HashEmbedder, HashReranker};
use crate::store::{BuildOptions, CorpusDoc, RawScores, Store};
use crate::text::{normalize_answer, Vocabulary};

pub const MULTIHOP_SUITE: &str = include_str!("../scenarios/multihop.json");
pub const SINGLE_SUITE: &str = include_str!("../scenarios/single.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDoc {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<RawScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub id: String,
    pub query: String,
    pub gold: String,
    pub documents: Vec<ScenarioDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Suite {
    pub suite: String,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<ScoreMode>,
    pub scenarios: Vec<Scenario>,
}

impl Suite {
    pub fn parse(json: &str, name: &str) -> Result<Suite> {
        let suite: Suite = serde_json::from_str(json).map_err(Error::json(name))?;
        suite.validate()?;
        Ok(suite)
    }

    /// Reads a suite file; `multihop` and `single` name the bundled suites.
    pub fn load(path_or_name: &str) -> Result<Suite> {
        match path_or_name {
            "multihop" => Suite::parse(MULTIHOP_SUITE, "multihop"),
            "single" => Suite::parse(SINGLE_SUITE, "single"),
            p => {
                let text = std::fs::read_to_string(p).map_err(Error::io(Path::new(p)))?;
                Suite::parse(&text, p)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenarios.is_empty() {
            return Err(Error::Config(format!("suite {:?} has no scenarios", self.suite)));
        }
        let mut ids = std::collections::BTreeSet::new();
        for s in &self.scenarios {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Config(format!("duplicate scenario id {:?}", s.id)));
            }
            if s.documents.is_empty() {
                return Err(Error::Config(format!("scenario {:?} has no documents", s.id)));
            }
        }
        if self.mode == Some(ScoreMode::Reranker) {
            return Err(Error::Config("suite mode must be a retrieval mode".into()));
        }
        Ok(())
    }

    fn texts(&self) -> impl Iterator<Item = &str> {
        self.scenarios.iter().flat_map(|s| {
            [s.query.as_str(), s.gold.as_str()].into_iter().chain(s.documents.iter().map(|d| d.text.as_str()))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Beta,
    Gamma,
    Components,
    Aggregation,
    Topk,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Beta => "beta",
            Axis::Gamma => "gamma",
            Axis::Components => "components",
            Axis::Aggregation => "aggregation",
            Axis::Topk => "topk",
        }
    }

    pub fn default_values(self) -> Vec<AxisValue> {
        match self {
            Axis::Beta => vec![
                AxisValue::Beta(BetaPolicy::Zero),
                AxisValue::Beta(BetaPolicy::Fixed(0.25)),
                AxisValue::Beta(BetaPolicy::Fixed(0.5)),
                AxisValue::Beta(BetaPolicy::Fixed(0.75)),
                AxisValue::Beta(BetaPolicy::Fixed(1.0)),
                AxisValue::Beta(BetaPolicy::DynamicFirstToken),
            ],
            Axis::Gamma => [0.5, 1.0, 1.5, 2.0, DEFAULT_GAMMA, 3.0, 4.0].into_iter().map(AxisValue::Gamma).collect(),
            Axis::Components => vec![
                AxisValue::Component(Component::OnlyContrastive),
                AxisValue::Component(Component::OnlyRetrieval),
                AxisValue::Component(Component::Full),
            ],
            Axis::Aggregation => Aggregation::ALL.into_iter().map(AxisValue::Aggregation).collect(),
            Axis::Topk => [8, 16, 32, 64, 128].into_iter().map(AxisValue::Topk).collect(),
        }
    }

    /// Parses one value for this axis.
    pub fn parse_value(self, s: &str) -> Result<AxisValue> {
        let bad = |why: String| Error::Config(format!("invalid {} value {s:?}: {why}", self.as_str()));
        Ok(match self {
            Axis::Beta => AxisValue::Beta(match s {
                "0" | "zero" => BetaPolicy::Zero,
                other => other.parse().map_err(|e: pced_core::DecodeError| bad(e.to_string()))?,
            }),
            Axis::Gamma => {
                let g: f64 = s.parse().map_err(|_| bad("not a number".into()))?;
                if !g.is_finite() || g < 0.0 {
                    return Err(bad("gamma must be finite and >= 0".into()));
                }
                AxisValue::Gamma(g)
            }
            Axis::Components => AxisValue::Component(s.parse().map_err(bad)?),
            Axis::Aggregation => {
                AxisValue::Aggregation(s.parse().map_err(|e: pced_core::DecodeError| bad(e.to_string()))?)
            }
            Axis::Topk => {
                let k: usize = s.parse().map_err(|_| bad("not an integer".into()))?;
                if k == 0 {
                    return Err(bad("top-k must be at least 1".into()));
                }
                AxisValue::Topk(k)
            }
        })
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(Axis::Beta),
            "gamma" => Ok(Axis::Gamma),
            "components" => Ok(Axis::Components),
            "aggregation" => Ok(Axis::Aggregation),
            "topk" | "top-k" => Ok(Axis::Topk),
            _ => Err(Error::Config(format!("unknown axis {s:?} (beta, gamma, components, aggregation, topk)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    /// Contrast only, no retrieval prior (`gamma = 0`).
    OnlyContrastive,
    /// Retrieval prior only, no contrast (`beta = 0`).
    OnlyRetrieval,
    Full,
}

impl Component {
    pub fn label(self) -> &'static str {
        match self {
            Component::OnlyContrastive => "Only Contrastive",
            Component::OnlyRetrieval => "Only Retrieval",
            Component::Full => "Full PCED",
        }
    }
}

impl FromStr for Component {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().replace(['-', '_'], " ").as_str() {
            "only contrastive" | "contrastive" => Ok(Component::OnlyContrastive),
            "only retrieval" | "retrieval" => Ok(Component::OnlyRetrieval),
            "full" | "full pced" => Ok(Component::Full),
            _ => Err("expected only-contrastive, only-retrieval or full".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisValue {
    Beta(BetaPolicy),
    Gamma(f64),
    Component(Component),
    Aggregation(Aggregation),
    Topk(usize),
}

impl AxisValue {
    pub fn label(&self) -> String {
        match self {
            AxisValue::Beta(b) => b.label(),
            AxisValue::Gamma(g) => format!("{g}"),
            AxisValue::Component(c) => c.label().to_string(),
            AxisValue::Aggregation(a) => a.as_str().to_string(),
            AxisValue::Topk(k) => k.to_string(),
        }
    }

    /// The decode configuration and top-k with only this parameter changed.
    pub fn apply(&self, base: &DecodeConfig, topk: usize) -> (DecodeConfig, usize) {
        let mut c = base.clone();
        let mut k = topk;
        match *self {
            AxisValue::Beta(b) => c.beta_policy = b,
            AxisValue::Gamma(g) => c.gamma = g,
            AxisValue::Component(Component::OnlyContrastive) => c.gamma = 0.0,
            AxisValue::Component(Component::OnlyRetrieval) => c.beta_policy = BetaPolicy::Zero,
            AxisValue::Component(Component::Full) => {}
            AxisValue::Aggregation(a) => c.aggregation = a,
            AxisValue::Topk(n) => k = n,
        }
        (c, k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<AxisValue>,
    pub repetitions: usize,
    pub base: DecodeConfig,
    pub topk: usize,
    /// Retrieval mode when the suite does not name one.
    pub mode: ScoreMode,
    pub seed: u64,
    pub workers: usize,
}

pub const DEFAULT_TOPK: usize = 8;

impl SweepSpec {
    /// Axis defaults unless `values` is given.
    pub fn new(axis: Axis, values: Option<&[String]>) -> Result<SweepSpec> {
        let values = match values {
            None => axis.default_values(),
            Some(v) => v.iter().map(|s| axis.parse_value(s.trim())).collect::<Result<_>>()?,
        };
        let spec = SweepSpec {
            axis,
            values,
            repetitions: 1,
            base: DecodeConfig::default(),
            topk: DEFAULT_TOPK,
            mode: ScoreMode::Dense,
            seed: 42,
            workers: 1,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep needs at least one value".into()));
        }
        if self.repetitions == 0 || self.topk == 0 || self.workers == 0 {
            return Err(Error::Config("repetitions, topk and workers must be at least 1".into()));
        }
        if self.mode == ScoreMode::Reranker {
            return Err(Error::Config("reranker is not a retrieval mode".into()));
        }
        self.base.validate()?;
        for v in &self.values {
            let (c, _) = v.apply(&self.base, self.topk);
            c.validate()?;
        }
        Ok(())
    }
}

/// A suite with its vocabulary, provider and one store per scenario.
pub struct PreparedSuite {
    pub suite: Suite,
    pub vocab: Vocabulary,
    pub provider: ToyModel,
    pub stores: Vec<Store>,
    embedder: HashEmbedder,
}

impl PreparedSuite {
    pub fn build(suite: Suite, provider: &ToySpec, seed: u64) -> Result<PreparedSuite> {
        suite.validate()?;
        let vocab = Vocabulary::build(suite.texts());
        let provider = provider.build(vocab.len(), seed)?;
        let embedder = HashEmbedder::default();
        let stores = suite
            .scenarios
            .iter()
            .map(|s| {
                let corpus: Vec<CorpusDoc> = s
                    .documents
                    .iter()
                    .map(|d| CorpusDoc { id: d.id.clone(), text: d.text.clone(), raw_scores: d.scores.clone() })
                    .collect();
                Store::build(&corpus, &vocab, &embedder, &provider, &BuildOptions::default())
            })
            .collect::<Result<_>>()?;
        Ok(PreparedSuite { suite, vocab, provider, stores, embedder })
    }

    /// Decodes one scenario and returns the answer text.
    pub fn answer(
        &self,
        scenario: usize,
        config: &DecodeConfig,
        topk: usize,
        mode: ScoreMode,
        seed: u64,
    ) -> Result<String> {
        let sc = &self.suite.scenarios[scenario];
        let store = &self.stores[scenario];
        let reranker = HashReranker::new(seed);
        let retrieval = store.retrieve(&self.embedder.embed(&sc.query), &sc.query, topk, mode, &reranker)?;
        let query = self.vocab.encode(&sc.query);
        let out = decode_retrieved(store, &retrieval, &query, config.clone(), &self.provider)?;
        Ok(self.vocab.decode(&out.tokens))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub value: String,
    pub scenario: String,
    pub answer: String,
    pub gold: String,
    pub correct_runs: usize,
    pub repetitions: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueSummary {
    pub value: String,
    pub config: DecodeConfig,
    pub topk: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub suite: String,
    pub axis: Axis,
    pub provider: String,
    pub mode: ScoreMode,
    pub seed: u64,
    pub spec: SweepSpec,
    pub values: Vec<ValueSummary>,
    pub cells: Vec<Cell>,
}

impl SweepResult {
    pub fn value(&self, label: &str) -> Option<&ValueSummary> {
        self.values.iter().find(|v| v.value == label)
    }
}

/// Runs every (value, scenario) cell, in parallel on up to `spec.workers`
/// threads. Results are ordered by value, then scenario.
pub fn run_sweep(spec: &SweepSpec, prepared: &PreparedSuite) -> Result<SweepResult> {
    spec.validate()?;
    let mode = prepared.suite.mode.unwrap_or(spec.mode);
    let n_sc = prepared.suite.scenarios.len();
    let jobs: Vec<(usize, usize)> = (0..spec.values.len()).flat_map(|v| (0..n_sc).map(move |s| (v, s))).collect();
    let run_cell = |&(v, s): &(usize, usize)| -> Result<Cell> {
        let value = &spec.values[v];
        let (config, topk) = value.apply(&spec.base, spec.topk);
        let sc = &prepared.suite.scenarios[s];
        let gold = normalize_answer(&sc.gold);
        let mut correct = 0;
        let mut answer = String::new();
        for _ in 0..spec.repetitions {
            answer = prepared.answer(s, &config, topk, mode, spec.seed)?;
            if normalize_answer(&answer) == gold {
                correct += 1;
            }
        }
        Ok(Cell {
            value: value.label(),
            scenario: sc.id.clone(),
            answer,
            gold: sc.gold.clone(),
            correct_runs: correct,
            repetitions: spec.repetitions,
            accuracy: correct as f64 / spec.repetitions as f64,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let cells: Vec<Cell> = pool.install(|| jobs.par_iter().map(run_cell).collect::<Result<_>>())?;

    let values = spec
        .values
        .iter()
        .enumerate()
        .map(|(v, value)| {
            let (config, topk) = value.apply(&spec.base, spec.topk);
            let mine = &cells[v * n_sc..(v + 1) * n_sc];
            ValueSummary {
                value: value.label(),
                config,
                topk,
                accuracy: mine.iter().map(|c| c.accuracy).sum::<f64>() / n_sc as f64,
            }
        })
        .collect();
    Ok(SweepResult {
        suite: prepared.suite.suite.clone(),
        axis: spec.axis,
        provider: prepared.provider.config().id(),
        mode,
        seed: spec.seed,
        spec: spec.clone(),
        values,
        cells,
    })
}

/// Plain-text table: one row per value, one column per scenario.
pub fn render_table(result: &SweepResult) -> String {
    let scenarios: Vec<&str> = {
        let mut seen = Vec::new();
        for c in &result.cells {
            if !seen.contains(&c.scenario.as_str()) {
                seen.push(c.scenario.as_str());
            }
        }
        seen
    };
    let vw = result.values.iter().map(|v| v.value.len()).max().unwrap_or(0).max(result.axis.as_str().len());
    let mut out = String::new();
    let _ = writeln!(out, "suite: {}  axis: {}  mode: {}", result.suite, result.axis.as_str(), result.mode.as_str());
    let _ = write!(out, "{:vw$}", result.axis.as_str());
    for s in &scenarios {
        let _ = write!(out, "  {s:>w$}", w = s.len().max(5));
    }
    let _ = writeln!(out, "  {:>8}", "accuracy");
    for v in &result.values {
        let _ = write!(out, "{:vw$}", v.value);
        for s in &scenarios {
            let acc = result.cells.iter().find(|c| c.value == v.value && c.scenario == *s).map_or(0.0, |c| c.accuracy);
            let _ = write!(out, "  {acc:>w$.2}", w = s.len().max(5));
        }
        let _ = writeln!(out, "  {:>8.3}", v.accuracy);
    }
    out
}

/// Machine-readable records: one `value` line per axis value, one `cell`
/// line per (value, scenario).
pub fn render_jsonl(result: &SweepResult) -> String {
    let mut out = String::new();
    for v in &result.values {
        let rec = serde_json::json!({"kind": "value", "suite": result.suite, "axis": result.axis, "value": v});
        out.push_str(&rec.to_string());
        out.push('\n');
    }
    for c in &result.cells {
        let rec = serde_json::json!({"kind": "cell", "suite": result.suite, "axis": result.axis, "cell": c});
        out.push_str(&rec.to_string());
        out.push('\n');
    }
    out
}
