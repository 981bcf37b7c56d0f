//! Whitespace vocabulary for the text encoder.
//!
//! Known words get dense ids after the three special tokens; everything else
//! lands in one of a fixed number of hash buckets.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const EOS: usize = 2;
const NUM_SPECIAL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Sequence ends with `[EOS]`; the output is read there.
    Eos,
    /// Sequence starts with `[CLS]`; the output is read there.
    Cls,
}

/// Encoder-side tokenization: lowercase word runs, with commas kept as
/// their own token so composed components stay visible to the model.
pub fn text_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '_' || ch == '\'' || ch == '-' {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if ch == ',' {
            out.push(",".to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr")]
pub struct Vocab {
    words: Vec<String>,
    oov_buckets: usize,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

#[derive(Deserialize)]
struct VocabRepr {
    words: Vec<String>,
    oov_buckets: usize,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Self {
        Vocab::from_words(r.words, r.oov_buckets)
    }
}

impl Vocab {
    /// Vocabulary over every token of `texts`, in first-seen order.
    pub fn build<I, S>(texts: I, oov_buckets: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut words = Vec::new();
        let mut index = HashMap::new();
        for text in texts {
            for tok in text_tokens(text.as_ref()) {
                if !index.contains_key(&tok) {
                    index.insert(tok.clone(), NUM_SPECIAL + words.len());
                    words.push(tok);
                }
            }
        }
        Vocab {
            words,
            oov_buckets: oov_buckets.max(1),
            index,
        }
    }

    pub fn from_words(words: Vec<String>, oov_buckets: usize) -> Self {
        let mut v = Vocab {
            words,
            oov_buckets: oov_buckets.max(1),
            index: HashMap::new(),
        };
        v.reindex();
        v
    }

    fn reindex(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), NUM_SPECIAL + i))
            .collect();
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn oov_buckets(&self) -> usize {
        self.oov_buckets
    }

    pub fn size(&self) -> usize {
        NUM_SPECIAL + self.words.len() + self.oov_buckets
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token_id(&self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let digest = Sha256::digest(token.as_bytes());
        let bucket = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
            % self.oov_buckets as u64;
        NUM_SPECIAL + self.words.len() + bucket as usize
    }

    /// Token ids with the pooling token attached: `[CLS] .. [EOS]` or `.. [EOS]`.
    pub fn encode(&self, text: &str, pooling: Pooling, max_tokens: usize) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        if pooling == Pooling::Cls {
            ids.push(CLS);
        }
        ids.extend(text_tokens(text).iter().map(|t| self.token_id(t)));
        ids.push(EOS);
        if ids.len() > max_tokens {
            return Err(Error::Overlength {
                len: ids.len(),
                max: max_tokens,
            });
        }
        Ok(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_keep_commas() {
        assert_eq!(
            text_tokens("A photo of a boxer, boxer, a participant (fighter)"),
            ["a", "photo", "of", "a", "boxer", ",", "boxer", ",", "a", "participant", "fighter"]
        );
        assert_eq!(text_tokens("causal_agent"), ["causal_agent"]);
    }

    #[test]
    fn ids_and_buckets() {
        let v = Vocab::build(["a photo of a dog"], 8);
        assert_eq!(v.size(), 3 + 4 + 8);
        assert_eq!(v.token_id("a"), 3);
        let oov = v.token_id("zzz");
        assert!((7..15).contains(&oov));
        assert_eq!(oov, v.token_id("zzz"));
        assert_eq!(v.encode("a dog", Pooling::Eos, 8).unwrap(), [3, 6, EOS]);
        assert_eq!(v.encode("a dog", Pooling::Cls, 8).unwrap(), [CLS, 3, 6, EOS]);
        assert!(matches!(
            v.encode("a dog", Pooling::Cls, 3),
            Err(Error::Overlength { len: 4, max: 3 })
        ));
    }

    #[test]
    fn serde_round_trip_reindexes() {
        let v = Vocab::build(["red circle", "blue square"], 4);
        let back: Vocab = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.token_id("square"), v.token_id("square"));
    }
}
