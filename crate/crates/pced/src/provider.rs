//! Provider specifications as written on the command line and in manifests.
//!
//! Only the toy provider ships. Its spec is `toy` optionally followed by
//! `:key=value` pairs separated by commas (`order`, `seed`, `presence`,
//! `copy`, `vocab`). Manifests record the resolved id (`toy-v1:vocab=...`),
//! which parses with the same grammar.

use pced_core::{ToyConfig, ToyModel};

use crate::error::{Error, Result};

pub const DEFAULT_ORDER: usize = 2;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ToySpec {
    pub vocab: Option<usize>,
    pub order: Option<usize>,
    pub seed: Option<u64>,
    pub presence: Option<f64>,
    pub copy: Option<f64>,
}

fn bad(spec: &str, why: &str) -> Error {
    Error::Config(format!("provider {spec:?}: {why}"))
}

impl std::str::FromStr for ToySpec {
    type Err = Error;

    fn from_str(spec: &str) -> Result<Self> {
        if spec.contains("://") {
            return Err(bad(spec, "external logit adapters are not shipped; only the toy provider is available"));
        }
        let (kind, params) = spec.split_once(':').unwrap_or((spec, ""));
        if kind != "toy" && kind != "toy-v1" {
            return Err(bad(spec, "unknown provider kind"));
        }
        let mut out = ToySpec::default();
        for pair in params.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = pair.split_once('=').ok_or_else(|| bad(spec, "expected key=value"))?;
            let num = |what| bad(spec, what);
            match k {
                "vocab" => out.vocab = Some(v.parse().map_err(|_| num("vocab must be an integer"))?),
                "order" => out.order = Some(v.parse().map_err(|_| num("order must be an integer"))?),
                "seed" => out.seed = Some(v.parse().map_err(|_| num("seed must be an integer"))?),
                "presence" => out.presence = Some(v.parse().map_err(|_| num("presence must be a number"))?),
                "copy" => out.copy = Some(v.parse().map_err(|_| num("copy must be a number"))?),
                _ => return Err(bad(spec, "unknown parameter")),
            }
        }
        Ok(out)
    }
}

impl ToySpec {
    /// Fills unset fields from the given defaults and validates the result.
    pub fn resolve(&self, vocab_size: usize, default_seed: u64) -> Result<ToyConfig> {
        let vocab_size = self.vocab.unwrap_or(vocab_size);
        let mut c = ToyConfig::new(vocab_size, self.order.unwrap_or(DEFAULT_ORDER), self.seed.unwrap_or(default_seed));
        if let Some(p) = self.presence {
            c.presence_bonus = p;
        }
        if let Some(b) = self.copy {
            c.copy_bonus = b;
        }
        if c.vocab_size < 2 {
            return Err(Error::Config("toy provider needs a vocabulary of at least 2".into()));
        }
        if c.order == 0 {
            return Err(Error::Config("toy provider order must be at least 1".into()));
        }
        if !c.presence_bonus.is_finite() || !c.copy_bonus.is_finite() {
            return Err(Error::Config("toy provider bonuses must be finite".into()));
        }
        Ok(c)
    }

    pub fn build(&self, vocab_size: usize, default_seed: u64) -> Result<ToyModel> {
        Ok(ToyModel::new(self.resolve(vocab_size, default_seed)?))
    }
}
