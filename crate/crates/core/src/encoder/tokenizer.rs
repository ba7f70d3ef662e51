use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const SOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<sos>", "<eos>", "<unk>"];

/// Lowercase word-level tokenizer; punctuation separates words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

impl From<Vec<String>> for Tokenizer {
    fn from(words: Vec<String>) -> Self {
        let ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Tokenizer { words, ids }
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.words
    }
}

/// Splits text into lowercase words.
pub fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

impl Tokenizer {
    /// Vocabulary of every word in `sentences`, sorted, after the specials.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> = sentences.into_iter().flat_map(words).collect();
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.extend(set);
        Self::from(all)
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.ids.get(word).copied()
    }

    /// Words of `text` missing from the vocabulary.
    pub fn unknown_words(&self, text: &str) -> Vec<String> {
        words(text)
            .into_iter()
            .filter(|w| !self.ids.contains_key(w))
            .collect()
    }

    /// `[SOS, words.., EOS]`; unknown words map to `UNK`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = vec![SOS];
        out.extend(words(text).iter().map(|w| self.id(w).unwrap_or(UNK)));
        out.push(EOS);
        out
    }

    /// Like [`Tokenizer::encode`] but fails on unknown words.
    pub fn encode_strict(&self, text: &str) -> Result<Vec<u32>> {
        let unknown = self.unknown_words(text);
        if unknown.is_empty() {
            Ok(self.encode(text))
        } else {
            Err(Error::VocabularyMiss(unknown))
        }
    }

    /// Space-joined words, dropping `PAD`, `SOS` and `EOS`.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != SOS && i != EOS)
            .map(|&i| self.words.get(i as usize).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
