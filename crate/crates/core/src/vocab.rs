use std::collections::HashMap;

use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
const RESERVED: [&str; 3] = ["<bos>", "<eos>", "<unk>"];

/// Lowercase, split on whitespace, drop non-alphanumeric characters.
///
/// Reserved tokens like `<bos>` can never come out of this.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Word/index bijection with `<bos>`, `<eos>`, `<unk>` at indices 0, 1, 2.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keep tokens seen at least `min_count` times, ordered by descending
    /// frequency and then lexicographically.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, min_count: usize) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for sentence in corpus {
            for tok in tokenize(sentence) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count.max(1))
            .collect();
        if kept.is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_words(
            RESERVED
                .iter()
                .map(|s| s.to_string())
                .chain(kept.into_iter().map(|(w, _)| w))
                .collect(),
        )
    }

    /// From a full word list, reserved tokens first.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() <= RESERVED.len() || words[..3] != RESERVED {
            return Err(Error::invalid(
                "vocabulary",
                "word list must start with <bos>, <eos>, <unk> and contain at least one word",
            ));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::invalid(
                    "vocabulary",
                    format!("duplicate word `{w}`"),
                ));
            }
        }
        Ok(Vocabulary { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, i: usize) -> Option<&str> {
        self.words.get(i).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Token ids of a sentence; unknown words are an error.
    pub fn encode(&self, sentence: &str) -> Result<Vec<usize>> {
        tokenize(sentence)
            .into_iter()
            .map(|t| self.id(&t).ok_or(Error::UnknownToken(t)))
            .collect()
    }

    /// Token ids of a sentence with unknown words mapped to `<unk>`.
    pub fn encode_lossy(&self, sentence: &str) -> Vec<usize> {
        tokenize(sentence)
            .into_iter()
            .map(|t| self.id(&t).unwrap_or(UNK))
            .collect()
    }

    /// Words for ids, skipping reserved tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i > UNK)
            .filter_map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.words).expect("words serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_words(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_count_filters() {
        let v = Vocabulary::build(["a b", "a c"], 2).unwrap();
        assert_eq!(&v.words()[3..], &["a".to_string()]);
        let v = Vocabulary::build(["a b", "a c"], 1).unwrap();
        assert_eq!(&v.words()[3..], &["a", "b", "c"]);
        assert!(matches!(
            Vocabulary::build(["a b"], 5),
            Err(Error::EmptyVocabulary)
        ));
    }

    #[test]
    fn tokenizer_lowercases_and_strips() {
        assert_eq!(
            tokenize("A Dog, on <bos> the Mat."),
            vec!["a", "dog", "on", "bos", "the", "mat"]
        );
    }

    #[test]
    fn encode_and_round_trip() {
        let v = Vocabulary::build(["the cat sat", "the dog"], 1).unwrap();
        let ids = v.encode("The cat").unwrap();
        assert_eq!(v.decode(&ids), "the cat");
        assert!(matches!(v.encode("the bird"), Err(Error::UnknownToken(_))));
        assert_eq!(v.encode_lossy("the bird")[1], UNK);
        assert_eq!(Vocabulary::from_json(&v.to_json()).unwrap(), v);
    }
}
