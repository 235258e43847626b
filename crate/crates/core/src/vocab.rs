//! Word-level tokenizer and corpus vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const EMPTY_TOKEN: &str = "[EMPTY]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const EMPTY_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

pub const DEFAULT_MAX_LEN: usize = 128;
pub const DEFAULT_MIN_FREQ: usize = 2;
pub const DEFAULT_MAX_VOCAB: usize = 20_000;

/// A lowercased word and its byte span in the original text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Word {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Splits on anything that is not alphanumeric and lowercases each piece.
pub fn split_words(text: &str) -> Vec<Word> {
    let mut words = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            if start.is_none() {
                start = Some(i);
            }
        } else if let Some(s) = start.take() {
            words.push(Word {
                text: text[s..i].to_lowercase(),
                start: s,
                end: i,
            });
        }
    }
    if let Some(s) = start {
        words.push(Word {
            text: text[s..].to_lowercase(),
            start: s,
            end: text.len(),
        });
    }
    words
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Byte span of each token in the source note; `(0, 0)` for `[EMPTY]`.
    pub spans: Vec<(usize, usize)>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn empty() -> Self {
        TokenSequence {
            ids: vec![EMPTY_ID],
            spans: vec![(0, 0)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Builds a vocabulary from a corpus. Words seen fewer than `min_freq`
    /// times are dropped; the rest are ordered by descending frequency with
    /// lexicographic tie-breaks, and the list is capped at `max_size` entries
    /// including the two reserved tokens.
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        min_freq: usize,
        max_size: usize,
    ) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for w in split_words(text) {
                *counts.entry(w.text).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq.max(1))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens = vec![EMPTY_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(
            ranked
                .into_iter()
                .take(max_size.saturating_sub(2))
                .map(|(w, _)| w),
        );
        Vocabulary::from(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(EMPTY_TOKEN)
            || tokens.get(1).map(String::as_str) != Some(UNK_TOKEN)
        {
            return Err(Error::invalid(
                "vocabulary must start with the reserved [EMPTY] and [UNK] tokens",
            ));
        }
        let vocab = Vocabulary::from(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::invalid("vocabulary contains duplicate tokens"));
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Total function: unknown words map to `[UNK]`, empty text to a single
    /// `[EMPTY]` token, and anything past `max_len` tokens is dropped.
    pub fn tokenize(&self, note: &str, max_len: usize) -> TokenSequence {
        let mut ids = Vec::new();
        let mut spans = Vec::new();
        for w in split_words(note).into_iter().take(max_len.max(1)) {
            ids.push(self.id(&w.text).unwrap_or(UNK_ID));
            spans.push((w.start, w.end));
        }
        if ids.is_empty() {
            return TokenSequence::empty();
        }
        TokenSequence { ids, spans }
    }
}
