//! Lowercasing whitespace/punctuation tokenizer over a fixed vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl Tokenizer {
    /// Vocabulary in order of first appearance, after the special tokens.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens = vec![PAD.to_string(), UNK.to_string()];
        let mut seen: HashMap<String, usize> = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        for text in corpus {
            for w in split_words(text) {
                if !seen.contains_key(&w) {
                    seen.insert(w.clone(), tokens.len());
                    tokens.push(w);
                }
            }
        }
        Self { tokens, ids: seen }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(&word.to_lowercase()).copied().unwrap_or(UNK_ID)
    }

    /// Token ids; text without any word encodes as a single `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let ids: Vec<usize> = split_words(text).iter().map(|w| self.id(w)).collect();
        if ids.is_empty() {
            vec![UNK_ID]
        } else {
            ids
        }
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.tokens.get(i).map_or(UNK, String::as_str)).collect::<Vec<_>>().join(" ")
    }
}

impl From<Vec<String>> for Tokenizer {
    fn from(tokens: Vec<String>) -> Self {
        let ids = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Self { tokens, ids }
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.tokens
    }
}
