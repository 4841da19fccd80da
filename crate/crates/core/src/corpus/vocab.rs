use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{tokenize, Bucket, Corpus};
use crate::error::{Error, Result};

/// Token to index map with PAD fixed at 0 and UNK at 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub const PAD: u32 = 0;
    pub const UNK: u32 = 1;
    pub const PAD_TOKEN: &'static str = "<pad>";
    pub const UNK_TOKEN: &'static str = "<unk>";

    /// Builds a vocabulary from an ordered list of tokens. The two reserved
    /// tokens are always placed first.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut v = Vocabulary {
            tokens: vec![Self::PAD_TOKEN.to_string(), Self::UNK_TOKEN.to_string()],
            index: HashMap::new(),
        };
        v.index.insert(Self::PAD_TOKEN.to_string(), Self::PAD);
        v.index.insert(Self::UNK_TOKEN.to_string(), Self::UNK);
        for t in tokens {
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len() as u32);
                v.tokens.push(t);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lookup(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn token(&self, index: u32) -> Option<&str> {
        self.tokens.get(index as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.lookup(t)).collect()
    }

    /// Indexes every train-split token seen at least `min_freq` times,
    /// ordered by descending frequency, then lexicographically.
    pub fn build(corpus: &Corpus, min_freq: usize) -> Result<Vocabulary> {
        if min_freq == 0 {
            return Err(Error::invalid("min_freq must be at least 1"));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut seen = 0usize;
        for t in corpus.bucket(Bucket::Train) {
            for u in &t.utterances {
                seen += 1;
                for tok in tokenize(&u.text) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        if seen == 0 {
            return Err(Error::invalid("training split is empty"));
        }
        let mut entries: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Vocabulary::from_tokens(entries.into_iter().map(|(t, _)| t)))
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        Vocabulary::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}
