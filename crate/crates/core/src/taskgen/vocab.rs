use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

/// Token string / index bijection. Indices 0, 1, 2 are PAD, BOS and EOS.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub fn new() -> Self {
        Vocab::from(vec!["<pad>".to_string(), "<bos>".to_string(), "<eos>".to_string()])
    }

    pub fn intern(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn intern_all(&mut self, words: &[&str]) -> Vec<usize> {
        words.iter().map(|w| self.intern(w)).collect()
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
            .ok_or_else(|| Error::UnknownToken(format!("#{id}")))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words = ids.iter().map(|&i| self.token(i)).collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// True when every id names a token (reserved ids included).
    pub fn covers(&self, ids: &[usize]) -> bool {
        ids.iter().all(|&i| i < self.tokens.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_and_round_trip() {
        let mut v = Vocab::new();
        assert_eq!(v.id("<pad>").unwrap(), PAD);
        assert_eq!(v.id("<bos>").unwrap(), BOS);
        assert_eq!(v.id("<eos>").unwrap(), EOS);
        let ids = v.intern_all(&["on", "the", "left", "the"]);
        assert_eq!(ids[1], ids[3]);
        assert_eq!(v.decode(&ids).unwrap(), "on the left the");
        assert_eq!(v.encode("the left").unwrap(), vec![ids[1], ids[2]]);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert!(v.id("nope").is_err());
    }
}
