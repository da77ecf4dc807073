use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{AttributedExample, Emotion, Strategy};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;

pub const SEP_TOKEN: &str = "</s>";
const SPECIALS: [&str; 4] = ["<pad>", "<s>", "<eos>", SEP_TOKEN];

/// Lowercases and collapses whitespace.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(|t| t.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Whitespace-token vocabulary. Ids 0..4 are PAD, BOS, EOS, SEP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocabulary::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its full token list (specials included).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS {
            return Err(Error::Config("vocabulary must start with the four special tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Builds from words; specials first, then the sorted distinct words.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> = words
            .into_iter()
            .map(str::to_lowercase)
            .filter(|w| !SPECIALS.contains(&w.as_str()))
            .collect();
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(set)
            .collect();
        Vocabulary::from_tokens(tokens).expect("specials are distinct")
    }

    /// Corpus-built vocabulary covering every text in `examples` plus all
    /// attribute words.
    pub fn from_examples(examples: &[AttributedExample]) -> Self {
        let attribute_words = Strategy::ALL
            .iter()
            .map(|s| s.word())
            .chain(Emotion::ALL.iter().map(|e| e.word()));
        let text_words = examples
            .iter()
            .flat_map(|e| e.hate_speech.split_whitespace().chain(e.counterspeech.split_whitespace()));
        Vocabulary::from_words(attribute_words.chain(text_words))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::UnknownTokenId(id as u32))
    }

    /// Encodes normalized text. No BOS/EOS is added.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|t| self.id(&t.to_lowercase()))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|&i| self.token(i)).collect();
        Ok(words?.join(" "))
    }

    /// Decodes, dropping special tokens.
    pub fn decode_text(&self, ids: &[usize]) -> Result<String> {
        let words: Result<Vec<&str>> = ids
            .iter()
            .filter(|&&i| i >= SPECIALS.len())
            .map(|&i| self.token(i))
            .collect();
        Ok(words?.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_words("the cat sat on a mat Quickly".split(' '))
    }

    #[test]
    fn specials_occupy_lowest_ids() {
        let v = vocab();
        assert_eq!(v.id("<pad>").unwrap(), PAD);
        assert_eq!(v.id("<s>").unwrap(), BOS);
        assert_eq!(v.id("<eos>").unwrap(), EOS);
        assert_eq!(v.id("</s>").unwrap(), SEP);
        assert_eq!(v.len(), 11);
        assert_eq!(v.token(4).unwrap(), "a");
    }

    #[test]
    fn decode_of_encode_normalizes() {
        let v = vocab();
        let ids = v.encode("  The CAT\tsat  </s> quickly ").unwrap();
        assert_eq!(v.decode(&ids).unwrap(), "the cat sat </s> quickly");
        assert!(matches!(v.encode("dog"), Err(Error::UnknownToken(_))));
        assert!(matches!(v.decode(&[99]), Err(Error::UnknownTokenId(99))));
    }

    #[test]
    fn rejects_bad_token_lists() {
        assert!(Vocabulary::from_tokens(vec!["a".into()]).is_err());
        let mut t: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        t.push("x".into());
        t.push("x".into());
        assert!(Vocabulary::from_tokens(t).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_ids_round_trip(ids in proptest::collection::vec(0usize..11, 0..20)) {
            let v = vocab();
            let text = v.decode(&ids).unwrap();
            prop_assert_eq!(v.encode(&text).unwrap(), ids);
        }
    }
}
