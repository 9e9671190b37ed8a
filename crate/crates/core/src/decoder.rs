//! Retrieval-aware contrastive decoding over parallel context experts.
//!
//! One amateur stream (no document) and one contextual stream per retrieved
//! document are advanced in lockstep. At every step each contextual expert's
//! logits are calibrated as
//!
//! ```text
//! s_hat_k = (1 + beta_k) * s_k - beta_k * s_0 + gamma * ln(max(r_k, eps))
//! ```
//!
//! and the next token is picked across experts by the configured
//! [`Aggregation`]. The chosen token is fed to every stream, amateur
//! included, so all experts share one generation history.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::lm::{argmax, LogitProvider, LogitVector, ProviderError, ProviderSession, TokenId};
use crate::score::{self, EPSILON};

/// Floor applied to probabilities before taking logs in the product rule.
pub const PROB_FLOOR: f64 = 1e-30;

/// Default retrieval-prior weight.
pub const DEFAULT_GAMMA: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Aggregation {
    /// Token-wise max over experts' calibrated logits.
    #[default]
    Max,
    /// Relevance-weighted sum of expert probabilities.
    Mixture,
    /// Relevance-weighted product of expert probabilities.
    Product,
}

impl Aggregation {
    pub const ALL: [Aggregation; 3] = [Aggregation::Max, Aggregation::Mixture, Aggregation::Product];

    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Max => "max",
            Aggregation::Mixture => "mixture",
            Aggregation::Product => "product",
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Aggregation {
    type Err = DecodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max" => Ok(Aggregation::Max),
            "mixture" | "moe" => Ok(Aggregation::Mixture),
            "product" | "poe" => Ok(Aggregation::Product),
            _ => Err(DecodeError::InvalidConfig("aggregation must be max, mixture or product")),
        }
    }
}

/// How the contrast strength is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum BetaPolicy {
    /// Each contextual expert gets `beta_k = JSD(p_k, p_0)` at the first
    /// generated token, frozen for the rest of the decode.
    #[default]
    DynamicFirstToken,
    /// One scalar `beta = JSD(p_1, p_0)` from the top-ranked expert, shared
    /// by all experts and frozen after the first token.
    DynamicGlobal,
    Fixed(f64),
    /// No contrast (`beta = 0`).
    Zero,
}

impl BetaPolicy {
    pub fn label(&self) -> String {
        match self {
            BetaPolicy::DynamicFirstToken => String::from("dynamic"),
            BetaPolicy::DynamicGlobal => String::from("dynamic-global"),
            BetaPolicy::Fixed(b) => alloc::format!("{b}"),
            BetaPolicy::Zero => String::from("0"),
        }
    }
}

impl FromStr for BetaPolicy {
    type Err = DecodeError;

    /// Accepts `dynamic`, `dynamic-global`, `zero` or a nonnegative number.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dynamic" | "dynamic_first_token" | "dynamic-first-token" => Ok(BetaPolicy::DynamicFirstToken),
            "dynamic-global" | "dynamic_global" => Ok(BetaPolicy::DynamicGlobal),
            "zero" => Ok(BetaPolicy::Zero),
            other => {
                let b: f64 = other.parse().map_err(|_| {
                    DecodeError::InvalidConfig("beta must be dynamic, dynamic-global, zero or a number")
                })?;
                if !b.is_finite() || b < 0.0 {
                    return Err(DecodeError::InvalidConfig("fixed beta must be finite and >= 0"));
                }
                Ok(BetaPolicy::Fixed(b))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TieBreak {
    /// Lowest token id first, then lowest expert index.
    #[default]
    LowestTokenThenExpert,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DecodeConfig {
    pub gamma: f64,
    pub beta_policy: BetaPolicy,
    pub aggregation: Aggregation,
    pub max_tokens: usize,
    /// `None` defers to the provider's stop tokens.
    pub stop_tokens: Option<Vec<TokenId>>,
    pub tie_break: TieBreak,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            gamma: DEFAULT_GAMMA,
            beta_policy: BetaPolicy::DynamicFirstToken,
            aggregation: Aggregation::Max,
            max_tokens: 32,
            stop_tokens: None,
            tie_break: TieBreak::LowestTokenThenExpert,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(DecodeError::InvalidConfig("gamma must be finite and >= 0"));
        }
        if let BetaPolicy::Fixed(b) = self.beta_policy {
            if !b.is_finite() || b < 0.0 {
                return Err(DecodeError::InvalidConfig("fixed beta must be finite and >= 0"));
            }
        }
        if self.max_tokens == 0 {
            return Err(DecodeError::InvalidConfig("max_tokens must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DecodeError {
    InvalidConfig(&'static str),
    LengthMismatch {
        expected: usize,
        found: usize,
    },
    NoExperts,
    /// The provider failed; `partial` holds everything decoded before it.
    Provider {
        error: ProviderError,
        partial: DecodeOutput,
    },
}

impl fmt::Display for DecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeError::InvalidConfig(msg) => write!(f, "invalid decode config: {msg}"),
            DecodeError::LengthMismatch { expected, found } => {
                write!(f, "logit length mismatch: expected {expected}, found {found}")
            }
            DecodeError::NoExperts => f.write_str("at least one contextual expert is required"),
            DecodeError::Provider { error, partial } => {
                write!(f, "{error} (after {} generated tokens)", partial.tokens.len())
            }
        }
    }
}

impl core::error::Error for DecodeError {}

/// `(1 + beta) * s_k - beta * s_0 + gamma * prior_log`, elementwise.
pub fn calibrate(
    expert: &[f64],
    amateur: &[f64],
    beta: f64,
    gamma: f64,
    prior_log: f64,
) -> Result<LogitVector, DecodeError> {
    if expert.len() != amateur.len() {
        return Err(DecodeError::LengthMismatch { expected: expert.len(), found: amateur.len() });
    }
    if !beta.is_finite() || !gamma.is_finite() || !prior_log.is_finite() {
        return Err(DecodeError::InvalidConfig("beta, gamma and prior must be finite"));
    }
    let shift = gamma * prior_log;
    let out = expert.iter().zip(amateur).map(|(&s, &a)| (1.0 + beta) * s - beta * a + shift).collect();
    LogitVector::new(out).map_err(|_| DecodeError::InvalidConfig("calibrated logits overflowed"))
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&x| libm::exp(x - max)).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Jensen-Shannon divergence (base 2) between `softmax(expert)` and
/// `softmax(amateur)`, in `[0, 1]`.
pub fn dynamic_beta(expert: &[f64], amateur: &[f64]) -> Result<f64, DecodeError> {
    if expert.len() != amateur.len() {
        return Err(DecodeError::LengthMismatch { expected: expert.len(), found: amateur.len() });
    }
    let p = softmax(expert);
    let q = softmax(amateur);
    let mut kl_p = 0.0;
    let mut kl_q = 0.0;
    for (&pi, &qi) in p.iter().zip(&q) {
        let m = 0.5 * (pi + qi);
        if pi > 0.0 {
            kl_p += pi * libm::log2(pi / m);
        }
        if qi > 0.0 {
            kl_q += qi * libm::log2(qi / m);
        }
    }
    Ok((0.5 * (kl_p + kl_q)).clamp(0.0, 1.0))
}

/// Outcome of cross-expert selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub token: TokenId,
    /// Index of the winning contextual expert.
    pub expert: usize,
    /// Aggregated score of the chosen token under the rule in use.
    pub score: f64,
}

fn normalized_weights(priors: &[f64]) -> Vec<f64> {
    let floored: Vec<f64> = priors.iter().map(|r| r.max(EPSILON)).collect();
    let total: f64 = floored.iter().sum();
    floored.into_iter().map(|r| r / total).collect()
}

/// Picks the next token from the experts' calibrated logits.
///
/// `priors` holds each expert's fused relevance `r_k`; the mixture and
/// product rules weight experts by `r_k / sum_j r_j`. Max ignores it.
pub fn select_token(
    calibrated: &[LogitVector],
    priors: &[f64],
    aggregation: Aggregation,
    tie_break: TieBreak,
) -> Result<Selection, DecodeError> {
    let TieBreak::LowestTokenThenExpert = tie_break;
    let first = calibrated.first().ok_or(DecodeError::NoExperts)?;
    let vocab = first.len();
    if let Some(bad) = calibrated.iter().find(|c| c.len() != vocab) {
        return Err(DecodeError::LengthMismatch { expected: vocab, found: bad.len() });
    }
    if priors.len() != calibrated.len() {
        return Err(DecodeError::LengthMismatch { expected: calibrated.len(), found: priors.len() });
    }
    if vocab == 0 {
        return Err(DecodeError::LengthMismatch { expected: 1, found: 0 });
    }

    match aggregation {
        Aggregation::Max => {
            let mut best = Selection { token: 0, expert: 0, score: f64::NEG_INFINITY };
            // Token-major scan with strict improvement keeps the lowest token,
            // then the lowest expert, on ties.
            for v in 0..vocab {
                for (k, c) in calibrated.iter().enumerate() {
                    let s = c.as_slice()[v];
                    if s > best.score {
                        best = Selection { token: v as TokenId, expert: k, score: s };
                    }
                }
            }
            Ok(best)
        }
        Aggregation::Mixture | Aggregation::Product => {
            let weights = normalized_weights(priors);
            let probs: Vec<Vec<f64>> = calibrated.iter().map(|c| softmax(c.as_slice())).collect();
            let mut combined = vec![0.0; vocab];
            for (p, &w) in probs.iter().zip(&weights) {
                for (acc, &pv) in combined.iter_mut().zip(p) {
                    *acc += match aggregation {
                        Aggregation::Mixture => w * pv,
                        _ => w * libm::log(pv.max(PROB_FLOOR)),
                    };
                }
            }
            let (token, score) = argmax(&combined).expect("vocab is nonempty");
            // Attribute the token to the expert contributing the most mass to it.
            let mut expert = 0;
            let mut best = f64::NEG_INFINITY;
            for (k, (p, &w)) in probs.iter().zip(&weights).enumerate() {
                let contribution = w * p[token as usize];
                if contribution > best {
                    best = contribution;
                    expert = k;
                }
            }
            Ok(Selection { token, expert, score })
        }
    }
}

/// One retrieved document as seen by the decoder.
#[derive(Debug, Clone, Copy)]
pub struct ExpertInput<'a> {
    /// Cache blob produced by the same provider.
    pub blob: &'a [u8],
    /// Fused relevance `r_k` in `[0, 1)`.
    pub relevance: f64,
}

/// Per-expert top candidate at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ExpertSnapshot {
    pub top_token: TokenId,
    pub top_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepTrace {
    pub step: usize,
    pub token: TokenId,
    /// Index of the winning contextual expert (retrieval order).
    pub winner: usize,
    pub experts: Vec<ExpertSnapshot>,
    pub betas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecodeOutput {
    pub tokens: Vec<TokenId>,
    pub trace: Vec<StepTrace>,
}

/// Step-wise decoder. Index 0 of the session list is the amateur; session
/// `k + 1` belongs to contextual expert `k`.
pub struct Decoder<'p, P: LogitProvider> {
    provider: &'p P,
    config: DecodeConfig,
    stop: Vec<TokenId>,
    sessions: Vec<P::Session>,
    priors: Vec<f64>,
    prior_logs: Vec<f64>,
    betas: Option<Vec<f64>>,
    logits: Vec<LogitVector>,
    output: DecodeOutput,
    finished: bool,
    pending: Option<TokenId>,
}

impl<'p, P: LogitProvider> Decoder<'p, P> {
    /// Opens the amateur and one session per expert, then feeds the query to
    /// all of them.
    pub fn start(
        provider: &'p P,
        experts: &[ExpertInput<'_>],
        query: &[TokenId],
        config: DecodeConfig,
    ) -> Result<Self, DecodeError> {
        config.validate()?;
        if experts.is_empty() {
            return Err(DecodeError::NoExperts);
        }
        let fail = |error| DecodeError::Provider { error, partial: DecodeOutput::default() };
        let mut sessions = Vec::with_capacity(experts.len() + 1);
        sessions.push(provider.open_session(&[]).map_err(fail)?);
        for e in experts {
            sessions.push(provider.open_session(e.blob).map_err(fail)?);
        }
        let mut logits = match query.split_last() {
            None => sessions.iter().map(|s| provider.logits(s)).collect::<Result<Vec<_>, _>>().map_err(fail)?,
            Some(_) => Vec::new(),
        };
        for &t in query {
            logits = provider.step_batch(&mut sessions, t).map_err(fail)?;
        }
        let vocab = provider.vocab_size();
        if let Some(bad) = logits.iter().find(|l| l.len() != vocab) {
            return Err(DecodeError::LengthMismatch { expected: vocab, found: bad.len() });
        }
        let stop = config.stop_tokens.clone().unwrap_or_else(|| provider.stop_tokens().to_vec());
        Ok(Decoder {
            provider,
            config,
            stop,
            sessions,
            priors: experts.iter().map(|e| e.relevance).collect(),
            prior_logs: experts.iter().map(|e| score::prior_log(e.relevance)).collect(),
            betas: None,
            logits,
            output: DecodeOutput::default(),
            finished: false,
            pending: None,
        })
    }

    fn freeze_betas(&self) -> Result<Vec<f64>, DecodeError> {
        let n = self.priors.len();
        let amateur = self.logits[0].as_slice();
        Ok(match self.config.beta_policy {
            BetaPolicy::DynamicFirstToken => {
                self.logits[1..].iter().map(|l| dynamic_beta(l.as_slice(), amateur)).collect::<Result<_, _>>()?
            }
            BetaPolicy::DynamicGlobal => vec![dynamic_beta(self.logits[1].as_slice(), amateur)?; n],
            BetaPolicy::Fixed(b) => vec![b; n],
            BetaPolicy::Zero => vec![0.0; n],
        })
    }

    /// Generates one token and feeds it to every session. Returns `None`
    /// once decoding has finished.
    pub fn step(&mut self) -> Result<Option<&StepTrace>, DecodeError> {
        if self.select()?.is_none() {
            return Ok(None);
        }
        self.advance()?;
        Ok(self.output.trace.last())
    }

    /// Chooses the next token without feeding it. Call [`Decoder::advance`]
    /// before selecting again; `select` does so itself if needed.
    pub fn select(&mut self) -> Result<Option<&StepTrace>, DecodeError> {
        self.advance()?;
        if self.finished {
            return Ok(None);
        }
        if self.betas.is_none() {
            self.betas = Some(self.freeze_betas()?);
        }
        let betas = self.betas.as_ref().expect("frozen above");
        let amateur = self.logits[0].as_slice();
        let calibrated = self.logits[1..]
            .iter()
            .zip(betas)
            .zip(&self.prior_logs)
            .map(|((l, &b), &p)| calibrate(l.as_slice(), amateur, b, self.config.gamma, p))
            .collect::<Result<Vec<_>, _>>()?;
        let pick = select_token(&calibrated, &self.priors, self.config.aggregation, self.config.tie_break)?;
        let experts = calibrated
            .iter()
            .map(|c| {
                let (top_token, top_score) = c.argmax().expect("nonempty vocab");
                ExpertSnapshot { top_token, top_score }
            })
            .collect();
        self.output.trace.push(StepTrace {
            step: self.output.tokens.len(),
            token: pick.token,
            winner: pick.expert,
            experts,
            betas: betas.clone(),
        });
        self.output.tokens.push(pick.token);
        if self.stop.contains(&pick.token) || self.output.tokens.len() >= self.config.max_tokens {
            self.finished = true;
        } else {
            self.pending = Some(pick.token);
        }
        Ok(self.output.trace.last())
    }

    /// Feeds the last selected token to every session. No-op if there is
    /// nothing pending.
    pub fn advance(&mut self) -> Result<(), DecodeError> {
        let Some(token) = self.pending.take() else {
            return Ok(());
        };
        match self.provider.step_batch(&mut self.sessions, token) {
            Ok(l) => {
                self.logits = l;
                Ok(())
            }
            Err(error) => {
                self.finished = true;
                Err(DecodeError::Provider { error, partial: self.output.clone() })
            }
        }
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Amateur first, then contextual experts in input order.
    pub fn sessions(&self) -> &[P::Session] {
        &self.sessions
    }

    /// Frozen per-expert betas, available after the first step.
    pub fn betas(&self) -> Option<&[f64]> {
        self.betas.as_deref()
    }

    /// Current raw logits, amateur first.
    pub fn logits(&self) -> &[LogitVector] {
        &self.logits
    }

    pub fn output(&self) -> &DecodeOutput {
        &self.output
    }

    pub fn config(&self) -> &DecodeConfig {
        &self.config
    }

    pub fn finish(self) -> DecodeOutput {
        self.output
    }

    /// True when every session has absorbed the same tokens since opening.
    pub fn histories_agree(&self) -> bool {
        let first = self.sessions[0].history();
        self.sessions.iter().all(|s| s.history() == first)
    }
}

/// Runs a decode to completion.
pub fn decode<P: LogitProvider>(
    provider: &P,
    experts: &[ExpertInput<'_>],
    query: &[TokenId],
    config: DecodeConfig,
) -> Result<DecodeOutput, DecodeError> {
    let mut decoder = Decoder::start(provider, experts, query, config)?;
    while decoder.step()?.is_some() {}
    Ok(decoder.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{greedy_decode, ToyModel};

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn calibrate_identity_without_beta_or_gamma() {
        let s = [0.3, -1.5, 2.25];
        let out = calibrate(&s, &[9.0, 9.0, 9.0], 0.0, 0.0, -3.0).unwrap();
        assert_eq!(out.as_slice(), &s);
    }

    #[test]
    fn calibrate_hand_example() {
        let out = calibrate(&[1.0, 2.0], &[0.5, 0.5], 0.5, 0.0, 0.0).unwrap();
        assert_eq!(out.as_slice(), &[1.25, 2.75]);
    }

    #[test]
    fn calibrate_near_one_prior_is_negligible() {
        let s = [1.0, -2.0, 0.5];
        let a = [0.1, 0.2, 0.3];
        let r = 1.0 - 1e-8;
        let with = calibrate(&s, &a, 0.7, 2.5, score::prior_log(r)).unwrap();
        let without = calibrate(&s, &a, 0.7, 0.0, score::prior_log(r)).unwrap();
        for (x, y) in with.as_slice().iter().zip(without.as_slice()) {
            assert!((x - y).abs() < 1e-7);
            assert!((x - y + 2.5e-8).abs() < 1e-12);
        }
    }

    #[test]
    fn calibrate_length_mismatch() {
        assert_eq!(
            calibrate(&[1.0], &[1.0, 2.0], 0.0, 0.0, 0.0),
            Err(DecodeError::LengthMismatch { expected: 1, found: 2 })
        );
    }

    #[test]
    fn jsd_examples() {
        let a = [0.2, 1.0, -0.4, 3.0];
        assert_eq!(dynamic_beta(&a, &a).unwrap(), 0.0);
        let disjoint = dynamic_beta(&[50.0, -50.0], &[-50.0, 50.0]).unwrap();
        assert!((disjoint - 1.0).abs() < 1e-12, "{disjoint}");
        let b = [1.0, 0.0, 0.5, -2.0];
        let ab = dynamic_beta(&a, &b).unwrap();
        let ba = dynamic_beta(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab > 0.0 && ab < 1.0);
    }

    #[test]
    fn select_single_expert_is_argmax() {
        let c = [lv(&[0.1, 0.9, 0.4])];
        for agg in Aggregation::ALL {
            let s = select_token(&c, &[0.5], agg, TieBreak::default()).unwrap();
            assert_eq!((s.token, s.expert), (1, 0));
        }
    }

    #[test]
    fn select_max_hand_example() {
        let c = [lv(&[3.0, 0.0]), lv(&[0.0, 2.0])];
        let s = select_token(&c, &[0.5, 0.5], Aggregation::Max, TieBreak::default()).unwrap();
        assert_eq!((s.token, s.expert), (0, 0));
        assert_eq!(s.score, 3.0);
    }

    #[test]
    fn select_max_ties_prefer_low_token_then_low_expert() {
        let c = [lv(&[0.0, 5.0, 5.0]), lv(&[5.0, 0.0, 0.0])];
        let s = select_token(&c, &[0.5, 0.5], Aggregation::Max, TieBreak::default()).unwrap();
        assert_eq!((s.token, s.expert), (0, 1));
        let c = [lv(&[1.0, 2.0]), lv(&[1.0, 2.0])];
        let s = select_token(&c, &[0.1, 0.9], Aggregation::Max, TieBreak::default()).unwrap();
        assert_eq!((s.token, s.expert), (1, 0));
    }

    #[test]
    fn mixture_of_identical_distributions() {
        let d = lv(&[0.3, 1.7, -0.2]);
        let s = select_token(&[d.clone(), d.clone()], &[0.5, 0.5], Aggregation::Mixture, TieBreak::default()).unwrap();
        assert_eq!(s.token, 1);
        let p = select_token(&[d.clone(), d], &[0.5, 0.5], Aggregation::Product, TieBreak::default()).unwrap();
        assert_eq!(p.token, 1);
    }

    #[test]
    fn mixture_weights_follow_relevance() {
        // A is sure about 0, B about 1; the heavier expert wins under both soft rules.
        let a = lv(&[10.0, 0.0]);
        let b = lv(&[0.0, 10.0]);
        for agg in [Aggregation::Mixture, Aggregation::Product] {
            let s = select_token(&[a.clone(), b.clone()], &[0.2, 0.8], agg, TieBreak::default()).unwrap();
            assert_eq!((s.token, s.expert), (1, 1), "{agg}");
        }
    }

    #[test]
    fn select_errors() {
        assert_eq!(select_token(&[], &[], Aggregation::Max, TieBreak::default()), Err(DecodeError::NoExperts));
        let c = [lv(&[1.0, 2.0]), lv(&[1.0])];
        assert!(matches!(
            select_token(&c, &[0.5, 0.5], Aggregation::Max, TieBreak::default()),
            Err(DecodeError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(DecodeConfig::default().validate().is_ok());
        let bad = DecodeConfig { gamma: -1.0, ..DecodeConfig::default() };
        assert!(bad.validate().is_err());
        let bad = DecodeConfig { beta_policy: BetaPolicy::Fixed(-0.1), ..DecodeConfig::default() };
        assert!(bad.validate().is_err());
        let bad = DecodeConfig { max_tokens: 0, ..DecodeConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("dynamic".parse::<BetaPolicy>().unwrap(), BetaPolicy::DynamicFirstToken);
        assert_eq!("0.25".parse::<BetaPolicy>().unwrap(), BetaPolicy::Fixed(0.25));
        assert_eq!("zero".parse::<BetaPolicy>().unwrap(), BetaPolicy::Zero);
        assert!("-1".parse::<BetaPolicy>().is_err());
        assert_eq!("poe".parse::<Aggregation>().unwrap(), Aggregation::Product);
        assert!("mean".parse::<Aggregation>().is_err());
    }

    #[test]
    fn stop_token_ends_decode() {
        let m = ToyModel::with_params(24, 1, 5);
        let doc = [4, 5, 6];
        let blob = m.prefill(&doc).unwrap();
        let experts = [ExpertInput { blob: &blob, relevance: 0.9 }];
        let cfg = DecodeConfig { max_tokens: 10, ..DecodeConfig::default() };
        let free = decode(&m, &experts, &[7], cfg.clone()).unwrap();
        assert!(free.tokens.len() >= 3);
        let stop = free.tokens[2];
        let cfg = DecodeConfig { stop_tokens: Some(vec![stop]), ..cfg };
        let out = decode(&m, &experts, &[7], cfg).unwrap();
        let first = out.tokens.iter().position(|&t| t == stop).unwrap();
        assert_eq!(out.tokens.len(), first + 1);
        assert_eq!(out.trace.len(), out.tokens.len());
        assert!(out.tokens.len() <= 3);
    }

    #[test]
    fn single_expert_without_calibration_is_greedy() {
        let m = ToyModel::with_params(40, 2, 11);
        let doc = [5, 6, 7, 8, 5, 6];
        let query = [9, 5];
        let blob = m.prefill(&doc).unwrap();
        let cfg = DecodeConfig { gamma: 0.0, beta_policy: BetaPolicy::Zero, max_tokens: 12, ..DecodeConfig::default() };
        let out = decode(&m, &[ExpertInput { blob: &blob, relevance: 0.3 }], &query, cfg).unwrap();
        let greedy = greedy_decode(&m, &blob, &query, 12).unwrap();
        assert_eq!(out.tokens, greedy);
    }

    #[test]
    fn empty_query_uses_restored_logits() {
        let m = ToyModel::with_params(16, 1, 2);
        let blob = m.prefill(&[3, 4]).unwrap();
        let cfg = DecodeConfig { gamma: 0.0, beta_policy: BetaPolicy::Zero, max_tokens: 1, ..DecodeConfig::default() };
        let out = decode(&m, &[ExpertInput { blob: &blob, relevance: 0.5 }], &[], cfg).unwrap();
        assert_eq!(out.tokens, greedy_decode(&m, &blob, &[], 1).unwrap());
    }

    #[test]
    fn betas_freeze_after_first_token() {
        let m = ToyModel::with_params(30, 2, 3);
        let a = m.prefill(&[4, 5, 6]).unwrap();
        let b = m.prefill(&[7, 8]).unwrap();
        let experts = [ExpertInput { blob: &a, relevance: 0.8 }, ExpertInput { blob: &b, relevance: 0.4 }];
        let mut d = Decoder::start(&m, &experts, &[9, 10], DecodeConfig::default()).unwrap();
        let expected: Vec<f64> =
            d.logits()[1..].iter().map(|l| dynamic_beta(l.as_slice(), d.logits()[0].as_slice()).unwrap()).collect();
        d.step().unwrap();
        assert_eq!(d.betas().unwrap(), expected.as_slice());
        while d.step().unwrap().is_some() {
            assert_eq!(d.betas().unwrap(), expected.as_slice());
            assert!(d.histories_agree());
        }
        assert!(d.output().trace.iter().all(|t| t.betas == expected));

        let mut g = Decoder::start(
            &m,
            &experts,
            &[9, 10],
            DecodeConfig { beta_policy: BetaPolicy::DynamicGlobal, ..DecodeConfig::default() },
        )
        .unwrap();
        g.step().unwrap();
        assert_eq!(g.betas().unwrap(), &[expected[0], expected[0]]);
    }

    #[test]
    fn decoder_rejects_empty_experts() {
        let m = ToyModel::with_params(8, 1, 0);
        assert!(matches!(Decoder::start(&m, &[], &[3], DecodeConfig::default()), Err(DecodeError::NoExperts)));
    }

    #[test]
    fn provider_failure_carries_partial_trace() {
        let m = ToyModel::with_params(8, 1, 0);
        let blob = m.prefill(&[3]).unwrap();
        let experts = [ExpertInput { blob: &blob, relevance: 0.5 }];
        // A query token outside the vocabulary fails before any generation.
        let err = decode(&m, &experts, &[99], DecodeConfig::default()).unwrap_err();
        match err {
            DecodeError::Provider { error, partial } => {
                assert!(matches!(error, ProviderError::TokenOutOfVocabulary { .. }));
                assert!(partial.tokens.is_empty());
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
