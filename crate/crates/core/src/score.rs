//! Relevance score normalization and fusion.
//!
//! Retrievers and rerankers emit scores on incompatible scales. Each mode is
//! mapped into `[0, 1 - EPSILON]` and the retrieval and reranker signals are
//! fused with an epsilon-guarded harmonic mean. The decoder consumes the
//! fused value through [`prior_log`], which floors it at `EPSILON` so the
//! log prior is always finite.

use core::f64::consts::PI;
use core::fmt;

/// Clipping and division guard used throughout (`1e-8`).
pub const EPSILON: f64 = 1e-8;

/// Upper bound of every normalized score.
pub const UPPER: f64 = 1.0 - EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ScoreMode {
    /// Cosine-style similarity in `[-1, 1]`.
    Dense,
    /// Late-interaction similarity, same range and normalization as dense.
    Colbert,
    /// Nonnegative, unbounded lexical score.
    Sparse,
    /// Cross-encoder logit.
    Reranker,
}

impl ScoreMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreMode::Dense => "dense",
            ScoreMode::Colbert => "colbert",
            ScoreMode::Sparse => "sparse",
            ScoreMode::Reranker => "reranker",
        }
    }
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl core::str::FromStr for ScoreMode {
    type Err = ScoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dense" => Ok(ScoreMode::Dense),
            "colbert" => Ok(ScoreMode::Colbert),
            "sparse" => Ok(ScoreMode::Sparse),
            "reranker" => Ok(ScoreMode::Reranker),
            _ => Err(ScoreError::UnknownMode),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreError {
    /// Dense or colbert score outside `[-1, 1]`.
    OutOfRange {
        mode: ScoreMode,
        value: f64,
    },
    /// NaN or infinite input.
    NonFinite {
        mode: ScoreMode,
    },
    UnknownMode,
}

impl fmt::Display for ScoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreError::OutOfRange { mode, value } => {
                write!(f, "{mode} score {value} outside [-1, 1]")
            }
            ScoreError::NonFinite { mode } => write!(f, "{mode} score is not finite"),
            ScoreError::UnknownMode => f.write_str("unknown score mode (expected dense, colbert, sparse or reranker)"),
        }
    }
}

impl core::error::Error for ScoreError {}

/// A raw score tagged with the mode that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawScore {
    value: f64,
    mode: ScoreMode,
}

impl RawScore {
    /// Validates `value` against the range contract of `mode`.
    pub fn new(value: f64, mode: ScoreMode) -> Result<Self, ScoreError> {
        if !value.is_finite() {
            return Err(ScoreError::NonFinite { mode });
        }
        if matches!(mode, ScoreMode::Dense | ScoreMode::Colbert) && !(-1.0..=1.0).contains(&value) {
            return Err(ScoreError::OutOfRange { mode, value });
        }
        Ok(RawScore { value, mode })
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn mode(&self) -> ScoreMode {
        self.mode
    }

    /// Maps the score into `[0, 1 - EPSILON]` with the mode's transform.
    pub fn normalize(&self) -> f64 {
        // Construction already validated the range, so these cannot fail.
        match self.mode {
            ScoreMode::Dense | ScoreMode::Colbert => clip_unit((self.value + 1.0) / 2.0),
            ScoreMode::Sparse => sparse_unchecked(self.value),
            ScoreMode::Reranker => clip_unit(sigmoid(self.value)),
        }
    }
}

#[inline]
fn clip_unit(x: f64) -> f64 {
    x.clamp(0.0, UPPER)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn sparse_unchecked(raw: f64) -> f64 {
    clip_unit((2.0 / PI) * libm::atan(raw.max(0.0)))
}

/// Affine map of a `[-1, 1]` similarity into `[0, 1 - EPSILON]`.
pub fn normalize_dense(raw: f64) -> Result<f64, ScoreError> {
    RawScore::new(raw, ScoreMode::Dense).map(|s| s.normalize())
}

/// Colbert scores share the dense transform.
pub fn normalize_colbert(raw: f64) -> Result<f64, ScoreError> {
    RawScore::new(raw, ScoreMode::Colbert).map(|s| s.normalize())
}

/// Saturating arctan transform for unbounded nonnegative scores.
///
/// Negative inputs are floored to zero before the transform.
pub fn normalize_sparse(raw: f64) -> Result<f64, ScoreError> {
    RawScore::new(raw, ScoreMode::Sparse).map(|s| s.normalize())
}

/// Sigmoid of a reranker logit, clipped to `[0, 1 - EPSILON]`.
pub fn normalize_reranker(logit: f64) -> Result<f64, ScoreError> {
    RawScore::new(logit, ScoreMode::Reranker).map(|s| s.normalize())
}

/// Epsilon-guarded harmonic mean `2ab / (a + b + EPSILON)`.
pub fn fuse(retrieval: f64, reranker: f64) -> f64 {
    2.0 * retrieval * reranker / (retrieval + reranker + EPSILON)
}

/// `ln(max(fused, EPSILON))`: the per-expert log prior seen by the decoder.
pub fn prior_log(fused: f64) -> f64 {
    libm::log(fused.max(EPSILON))
}

/// Normalized retrieval and reranker scores for one document plus their fusion.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RelevanceScore {
    pub retrieval: f64,
    pub reranker: f64,
    pub fused: f64,
}

impl RelevanceScore {
    /// Fuses two already-normalized scores.
    pub fn from_normalized(retrieval: f64, reranker: f64) -> Self {
        RelevanceScore { retrieval, reranker, fused: fuse(retrieval, reranker) }
    }

    pub fn from_raw(retrieval: RawScore, reranker: RawScore) -> Self {
        Self::from_normalized(retrieval.normalize(), reranker.normalize())
    }

    pub fn prior_log(&self) -> f64 {
        prior_log(self.fused)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn dense_examples() {
        assert_eq!(normalize_dense(-1.0).unwrap(), 0.0);
        assert_eq!(normalize_dense(1.0).unwrap(), 1.0 - 1e-8);
        assert_eq!(normalize_dense(0.0).unwrap(), 0.5);
        assert_eq!(normalize_colbert(0.0).unwrap(), 0.5);
    }

    #[test]
    fn dense_rejects_out_of_range() {
        assert!(matches!(normalize_dense(1.5), Err(ScoreError::OutOfRange { .. })));
        assert!(matches!(normalize_colbert(-1.0001), Err(ScoreError::OutOfRange { .. })));
        assert!(matches!(normalize_dense(f64::NAN), Err(ScoreError::NonFinite { .. })));
    }

    #[test]
    fn sparse_examples() {
        assert_eq!(normalize_sparse(0.0).unwrap(), 0.0);
        assert!(close(normalize_sparse(1.0).unwrap(), 0.5, 1e-15));
        // (2/pi) atan(1e9) = 1 - 6.4e-10, above the clip point.
        let big = normalize_sparse(1e9).unwrap();
        assert!(big > 0.999_999 && big <= 1.0 - 1e-8);
        assert_eq!(big, 1.0 - 1e-8);
        assert_eq!(normalize_sparse(-3.0).unwrap(), 0.0);
        assert!(normalize_sparse(f64::INFINITY).is_err());
    }

    #[test]
    fn reranker_examples() {
        assert_eq!(normalize_reranker(0.0).unwrap(), 0.5);
        assert_eq!(normalize_reranker(50.0).unwrap(), 1.0 - 1e-8);
        for z in [0.3, 1.0, 4.0, 11.0] {
            assert!(close(sigmoid(z) + sigmoid(-z), 1.0, 1e-15));
        }
        assert!(normalize_reranker(f64::NEG_INFINITY).is_err());
        assert!(normalize_reranker(-800.0).unwrap() >= 0.0);
    }

    #[test]
    fn fuse_examples() {
        assert!(close(fuse(0.8, 0.8), 0.8, 1e-7));
        assert_eq!(fuse(0.0, 0.9), 0.0);
        let v = fuse(0.5, 1.0 - 1e-8);
        assert!(close(v, 2.0 / 3.0, 1e-7));
    }

    #[test]
    fn prior_is_floored() {
        assert!(close(prior_log(0.0), libm::log(1e-8), 1e-12));
        assert!(prior_log(0.0).is_finite());
        assert!(close(prior_log(1.0 - 1e-8), -1e-8, 1e-15));
    }

    #[test]
    fn mode_parse_roundtrip() {
        for m in [ScoreMode::Dense, ScoreMode::Colbert, ScoreMode::Sparse, ScoreMode::Reranker] {
            assert_eq!(m.as_str().parse::<ScoreMode>().unwrap(), m);
        }
        assert!("bm25".parse::<ScoreMode>().is_err());
    }
}
