use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::EncodedInput;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;

const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Whitespace, lowercase-folded vocabulary with dense ids; ids 0..4 are the
/// special tokens `[PAD] [UNK] [CLS] [SEP]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|w| w.to_lowercase())
}

impl Vocabulary {
    /// Builds from training texts, keeping words seen at least `min_freq`
    /// times. Ordered by descending frequency, then lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in words(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_freq.max(1) && !SPECIALS.contains(&w.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(kept.into_iter().map(|(w, _)| w)).collect();
        Self::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(&word.to_lowercase()).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `[CLS] a [SEP]` or `[CLS] a [SEP] b [SEP]`, truncated to `max_len`
    /// (longer side first for pairs) and padded with `[PAD]`.
    pub fn encode(&self, text_a: &str, text_b: Option<&str>, max_len: usize) -> Encoding {
        let a: Vec<u32> = words(text_a).map(|w| self.id(&w)).collect();
        let b: Option<Vec<u32>> = text_b.map(|t| words(t).map(|w| self.id(&w)).collect());
        let (ka, kb) = match &b {
            None => (a.len().min(max_len.saturating_sub(2)), 0),
            Some(b) => truncate_pair(a.len(), b.len(), max_len.saturating_sub(3)),
        };
        let mut ids = vec![CLS];
        ids.extend_from_slice(&a[..ka]);
        ids.push(SEP);
        let mut segments = vec![0u8; ids.len()];
        if let Some(b) = &b {
            ids.extend_from_slice(&b[..kb]);
            ids.push(SEP);
            segments.resize(ids.len(), 1);
        }
        let length = ids.len();
        ids.resize(max_len.max(length), PAD);
        segments.resize(ids.len(), 0);
        Encoding { ids, segments, length }
    }
}

/// Longest-first truncation: while over budget, drop a token from the longer
/// side (from `b` on ties). Returns the kept lengths.
pub(crate) fn truncate_pair(mut a: usize, mut b: usize, budget: usize) -> (usize, usize) {
    while a + b > budget {
        if a > b {
            a -= 1;
        } else {
            b -= 1;
        }
    }
    (a, b)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
    /// Number of non-padding positions.
    pub length: usize,
}

impl Encoding {
    pub fn unpadded(&self) -> EncodedInput {
        EncodedInput { ids: self.ids[..self.length].to_vec(), segments: self.segments[..self.length].to_vec() }
    }
}
