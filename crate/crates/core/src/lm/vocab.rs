use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Whitespace word vocabulary. Ids are dense: the four specials first,
/// then corpus words by descending frequency, ties lexicographic.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

impl Vocab {
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, min_count: usize) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut lines = 0;
        for line in corpus {
            lines += 1;
            for w in tokenize(line) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if lines == 0 {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && !SPECIALS.contains(&w.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let words = SPECIALS.iter().map(|s| s.to_string()).chain(ranked.into_iter().map(|(w, _)| w)).collect::<Vec<_>>();
        Ok(Self::from(words))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or(SPECIALS[UNK], String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Word ids without any specials.
    pub fn encode_words(&self, text: &str) -> Vec<usize> {
        tokenize(text).map(|w| self.id(&w)).collect()
    }

    /// `<bos>` followed by the word ids.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        std::iter::once(BOS).chain(self.encode_words(text)).collect()
    }

    /// Joins words with single spaces, stopping at `<eos>` and skipping
    /// `<pad>` and `<bos>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Hex SHA-256 over the ordered word list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_then_lexicographic_order() {
        let v = Vocab::build(["a b", "a"], 1).unwrap();
        assert_eq!(v.words(), &["<pad>", "<bos>", "<eos>", "<unk>", "a", "b"]);
        assert!(v.id("a") < v.id("b"));
        let v = Vocab::build(["z y", "y z"], 1).unwrap();
        assert_eq!(v.id("y"), 4);
    }

    #[test]
    fn encode_decode() {
        let v = Vocab::build(["a b", "a"], 1).unwrap();
        assert_eq!(v.encode("a b"), vec![BOS, v.id("a"), v.id("b")]);
        assert_eq!(v.encode_words("A c"), vec![v.id("a"), UNK]);
        assert_eq!(v.decode(&v.encode("b a b")), "b a b");
        assert_eq!(v.decode(&[BOS, 4, EOS, 5]), "a");
    }

    #[test]
    fn min_count_and_empty_corpus() {
        let v = Vocab::build(["a a b"], 2).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("b"), UNK);
        assert!(Vocab::build(std::iter::empty::<&str>(), 1).is_err());
    }

    #[test]
    fn hash_tracks_order() {
        let a = Vocab::build(["a b", "a"], 1).unwrap();
        let b = Vocab::build(["b a", "b"], 1).unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), Vocab::from(a.words().to_vec()).hash());
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), a);
    }
}
