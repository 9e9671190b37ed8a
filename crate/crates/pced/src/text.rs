//! Word-level vocabulary for the toy provider.

use std::collections::{BTreeSet, HashMap};

use pced_core::lm::{TOY_EOS, TOY_SEP, TOY_UNK};
use pced_core::TokenId;

pub const EOS_TEXT: &str = "<eos>";
pub const SEP_TEXT: &str = "<sep>";
pub const UNK_TEXT: &str = "<unk>";

/// Lowercases, splits on whitespace and splits ASCII punctuation into
/// separate words. `<eos>`, `<sep>` and `<unk>` are kept whole.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let lower = chunk.to_lowercase();
        if matches!(lower.as_str(), EOS_TEXT | SEP_TEXT | UNK_TEXT) {
            out.push(lower);
            continue;
        }
        let mut cur = String::new();
        for ch in lower.chars() {
            if ch.is_ascii_punctuation() && ch != '\'' && ch != '-' {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Case-insensitive, whitespace-normalized form used for exact match.
pub fn normalize_answer(text: &str) -> String {
    words(text).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Specials first (`<eos>`, `<sep>`, `<unk>` at the toy model's reserved
    /// ids), then every distinct word of `texts` in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for t in texts {
            set.extend(words(t));
        }
        let mut list = vec![EOS_TEXT.to_string(), SEP_TEXT.to_string(), UNK_TEXT.to_string()];
        list.extend(set.into_iter().filter(|w| !matches!(w.as_str(), EOS_TEXT | SEP_TEXT | UNK_TEXT)));
        Self::from_words(list).expect("specials are in place")
    }

    /// Rebuilds a vocabulary from its persisted word list.
    pub fn from_words(words: Vec<String>) -> Option<Self> {
        if words.len() < 3
            || words[TOY_EOS as usize] != EOS_TEXT
            || words[TOY_SEP as usize] != SEP_TEXT
            || words[TOY_UNK as usize] != UNK_TEXT
        {
            return None;
        }
        let index: HashMap<String, TokenId> =
            words.iter().enumerate().map(|(i, w)| (w.clone(), i as TokenId)).collect();
        if index.len() != words.len() {
            return None;
        }
        Some(Vocabulary { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        words(text).iter().map(|w| self.index.get(w).copied().unwrap_or(TOY_UNK)).collect()
    }

    pub fn token_text(&self, id: TokenId) -> &str {
        self.words.get(id as usize).map_or(UNK_TEXT, String::as_str)
    }

    /// Joins tokens with single spaces, dropping the stop token.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().filter(|&&t| t != TOY_EOS).map(|&t| self.token_text(t)).collect::<Vec<_>>().join(" ")
    }
}
