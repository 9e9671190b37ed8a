//! Line-delimited JSON step traces and their text rendition.
//!
//! A trace file starts with one `{"kind":"header",...}` record carrying the
//! resolved configuration, the query and the experts (in decoder order),
//! followed by one `{"kind":"step",...}` record per generated token.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use pced_core::{StepTrace, TokenId};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceExpert {
    pub doc_id: String,
    pub fused: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub config: serde_json::Value,
    pub query: String,
    pub experts: Vec<TraceExpert>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertTop {
    pub doc_id: String,
    pub top_token: TokenId,
    pub top_text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub token: TokenId,
    pub text: String,
    pub winner: usize,
    pub winner_doc: String,
    pub betas: Vec<f64>,
    pub experts: Vec<ExpertTop>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceLine {
    Header(TraceHeader),
    Step(StepRecord),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub header: Option<TraceHeader>,
    pub steps: Vec<StepRecord>,
}

/// Attaches document ids and token text to the decoder's raw trace.
pub fn step_records(trace: &[StepTrace], doc_ids: &[String], vocab: &Vocabulary) -> Vec<StepRecord> {
    let doc = |k: usize| doc_ids.get(k).cloned().unwrap_or_else(|| format!("#{k}"));
    trace
        .iter()
        .map(|t| StepRecord {
            step: t.step,
            token: t.token,
            text: vocab.token_text(t.token).to_string(),
            winner: t.winner,
            winner_doc: doc(t.winner),
            betas: t.betas.clone(),
            experts: t
                .experts
                .iter()
                .enumerate()
                .map(|(k, e)| ExpertTop {
                    doc_id: doc(k),
                    top_token: e.top_token,
                    top_text: vocab.token_text(e.top_token).to_string(),
                    score: e.top_score,
                })
                .collect(),
        })
        .collect()
}

pub fn write_trace(out: &mut impl Write, header: &TraceHeader, steps: &[StepRecord]) -> std::io::Result<()> {
    let mut line = |rec: &TraceLine| -> std::io::Result<()> {
        serde_json::to_writer(&mut *out, rec)?;
        out.write_all(b"\n")
    };
    line(&TraceLine::Header(header.clone()))?;
    for s in steps {
        line(&TraceLine::Step(s.clone()))?;
    }
    out.flush()
}

pub fn read_trace(input: impl BufRead, name: &str) -> Result<Trace> {
    let mut trace = Trace::default();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(Error::io(name))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceLine =
            serde_json::from_str(&line).map_err(|e| Error::Config(format!("{name}:{}: {e}", n + 1)))?;
        match rec {
            TraceLine::Header(h) => trace.header = Some(h),
            TraceLine::Step(s) => trace.steps.push(s),
        }
    }
    Ok(trace)
}

/// Expert-usage chart: one row per expert, one column per step, `#` where
/// that expert won the token.
pub fn render_plot(trace: &Trace) -> String {
    let mut experts: Vec<String> = match &trace.header {
        Some(h) => h.experts.iter().map(|e| e.doc_id.clone()).collect(),
        None => Vec::new(),
    };
    for s in &trace.steps {
        if s.winner >= experts.len() {
            experts.resize_with(s.winner + 1, String::new);
        }
        if experts[s.winner].is_empty() {
            experts[s.winner] = s.winner_doc.clone();
        }
    }
    let label_w = experts.iter().map(String::len).max().unwrap_or(0).max(6);
    let mut out = String::new();
    if let Some(h) = &trace.header {
        let _ = writeln!(out, "query: {}", h.query);
    }
    let _ = writeln!(
        out,
        "{:label_w$} | {}",
        "step",
        (0..trace.steps.len()).map(|i| char::from(b'0' + (i % 10) as u8)).collect::<String>()
    );
    for (k, name) in experts.iter().enumerate() {
        let row: String = trace.steps.iter().map(|s| if s.winner == k { '#' } else { '.' }).collect();
        let wins = trace.steps.iter().filter(|s| s.winner == k).count();
        let _ = writeln!(out, "{name:label_w$} | {row}  ({wins})");
    }
    let _ = writeln!(out);
    let mut last = None;
    for s in &trace.steps {
        let switch = if last.is_some_and(|w| w != s.winner) { "  <- switch" } else { "" };
        let _ = writeln!(out, "{:>4}  {:<16} {}{switch}", s.step, s.text, s.winner_doc);
        last = Some(s.winner);
    }
    out
}
