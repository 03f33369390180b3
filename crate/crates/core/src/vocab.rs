use std::collections::HashMap;

use crate::corpus::{ClozeInstance, PLACEHOLDER};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const ENT: &str = "[ENT]";
pub const UNK: &str = "[UNK]";

/// Reserved tokens occupy the first ids, in this order.
pub const RESERVED: [&str; 5] = [CLS, SEP, ENT, PLACEHOLDER, UNK];

pub const CLS_ID: usize = 0;
pub const SEP_ID: usize = 1;
pub const ENT_ID: usize = 2;
pub const PLC_ID: usize = 3;
pub const UNK_ID: usize = 4;

/// Word vocabulary. Corpus tokens get ids in order of first occurrence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(std::iter::empty::<String>())
    }
}

impl Vocabulary {
    /// Builds a vocabulary from a token stream; reserved tokens are always present first.
    pub fn from_tokens<I, S>(stream: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for tok in RESERVED {
            vocab.insert(tok);
        }
        for tok in stream {
            vocab.insert(tok.as_ref());
        }
        vocab
    }

    fn insert(&mut self, tok: &str) {
        if !self.index.contains_key(tok) {
            self.index.insert(tok.to_string(), self.tokens.len());
            self.tokens.push(tok.to_string());
        }
    }

    /// Id of `tok`, or the unknown-word id.
    pub fn id(&self, tok: &str) -> usize {
        self.index.get(tok).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, tok: &str) -> Option<usize> {
        self.index.get(tok).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of non-reserved entries.
    pub fn corpus_len(&self) -> usize {
        self.tokens.len() - RESERVED.len()
    }

    /// All tokens in id order, reserved ones included.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Vocabulary over the concatenated token stream of `instances` (question, then sentences).
pub fn build_vocab(instances: &[ClozeInstance]) -> Vocabulary {
    Vocabulary::from_tokens(instances.iter().flat_map(ClozeInstance::token_stream))
}
