//! Visually grounded tokens: frequent non-stopwords, masked to simulate
//! limited textual context.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use super::vocab::MASK_SYMBOL;
use crate::error::{MmtError, Result};

pub const DEFAULT_MIN_COUNT: usize = 30;

const DEFAULT_STOPWORDS: &str = include_str!("../../assets/stopwords_en.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stopwords(HashSet<String>);

impl Stopwords {
    pub fn parse(text: &str) -> Self {
        Self(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_lowercase)
                .collect(),
        )
    }

    pub fn english() -> Self {
        Self::parse(DEFAULT_STOPWORDS)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path).map_err(|e| MmtError::io(path, e))?))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.contains(&token.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Tokens occurring strictly more than `min_count` times, stopwords removed.
pub fn build_grounded_vocab<S: AsRef<str>>(sentences: &[S], stopwords: &Stopwords, min_count: usize) -> BTreeSet<String> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in sentences {
        for tok in s.as_ref().split_whitespace() {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    counts
        .into_iter()
        .filter(|&(tok, c)| c > min_count && tok != MASK_SYMBOL && !stopwords.contains(tok))
        .map(|(tok, _)| tok.to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Masked {
    pub tokens: Vec<String>,
    pub masked: usize,
}

impl Masked {
    pub fn fraction(&self) -> f64 {
        if self.tokens.is_empty() {
            0.0
        } else {
            self.masked as f64 / self.tokens.len() as f64
        }
    }
}

/// Replaces every grounded token with the mask symbol.
pub fn mask_grounded_tokens<S: AsRef<str>>(tokens: &[S], grounded: &BTreeSet<String>) -> Masked {
    let mut masked = 0;
    let tokens = tokens
        .iter()
        .map(|t| {
            if grounded.contains(t.as_ref()) {
                masked += 1;
                MASK_SYMBOL.to_string()
            } else {
                t.as_ref().to_string()
            }
        })
        .collect();
    Masked { tokens, masked }
}

/// Masks a whitespace-tokenized sentence; returns the new text and the
/// number of masked tokens.
pub fn mask_sentence(sentence: &str, grounded: &BTreeSet<String>) -> Masked {
    let toks: Vec<&str> = sentence.split_whitespace().collect();
    mask_grounded_tokens(&toks, grounded)
}
