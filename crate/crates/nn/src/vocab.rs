use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::NnError;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Lowercases and splits on whitespace and ASCII punctuation.
pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence
        .split(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Specials first, then tokens seen at least `min_freq` times, most
    /// frequent first, ties alphabetical.
    pub fn build<S: AsRef<str>>(sentences: &[S], min_freq: usize) -> Self {
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for s in sentences {
            for t in tokenize(s.as_ref()) {
                *freq.entry(t).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = freq
            .into_iter()
            .filter(|(t, n)| *n >= min_freq.max(1) && !SPECIALS.contains(&t.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(t, _)| t))
            .collect::<Vec<_>>();
        tokens.into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str, NnError> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(NnError::TokenOutOfRange {
                id,
                size: self.len(),
            })
    }

    /// Token ids of a sentence, without start or end markers.
    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        tokenize(sentence).iter().map(|t| self.id(t)).collect()
    }

    /// Words up to the first end marker; pad and start markers are skipped.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>, NnError> {
        let mut out = Vec::new();
        for &id in ids {
            match id {
                EOS => break,
                PAD | BOS => {}
                _ => out.push(self.token(id)?.to_string()),
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_lowercases_and_strips_punctuation() {
        assert_eq!(
            tokenize("A man, then  the DOG."),
            ["a", "man", "then", "the", "dog"]
        );
        assert!(tokenize(" ,.; ").is_empty());
    }

    #[test]
    fn ids_are_dense_with_reserved_specials() {
        let v = Vocabulary::build(&["the dog runs", "the cat"], 1);
        assert_eq!(v.token(PAD).unwrap(), "<pad>");
        assert_eq!(v.token(EOS).unwrap(), "</s>");
        assert_eq!(v.id("the"), 4);
        assert_eq!(v.id("zebra"), UNK);
        assert_eq!(v.len(), 8);
        for i in 0..v.len() {
            assert_eq!(v.id(v.token(i).unwrap()), i);
        }
        assert!(v.token(8).is_err());
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = Vocabulary::build(&["a man plays the guitar"], 1);
        let mut ids = v.encode("A man plays the guitar!");
        ids.push(EOS);
        ids.push(v.id("man"));
        assert_eq!(v.decode(&ids).unwrap().join(" "), "a man plays the guitar");
    }

    #[test]
    fn min_frequency_filters() {
        let v = Vocabulary::build(&["a b b", "b c"], 2);
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), UNK);
    }

    #[test]
    fn serde_as_token_list() {
        let v = Vocabulary::build(&["x y"], 1);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocabulary>(&json).unwrap(), v);
    }
}
