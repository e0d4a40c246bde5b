//! Subword vocabulary and integer-encoded sentences.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";
pub const MASK_TOKEN: &str = "<mask>";
pub const SEP_TOKEN: &str = "<sep>";

const SPECIALS: [&str; 6] = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN, MASK_TOKEN, SEP_TOKEN];

/// Ids of the reserved tokens. Always the first six ids, in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: TokenId,
    pub bos: TokenId,
    pub eos: TokenId,
    pub unk: TokenId,
    pub mask: TokenId,
    pub sep: TokenId,
}

impl SpecialIds {
    pub const fn standard() -> Self {
        SpecialIds { pad: 0, bos: 1, eos: 2, unk: 3, mask: 4, sep: 5 }
    }
}

/// Ordered subword inventory. Ids are dense and stable: specials first, then
/// the supplied tokens in their given order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Build from non-special token strings. Tokens colliding with a special
    /// string are rejected: specials are never produced by subword merges.
    pub fn new(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for t in tokens {
            if SPECIALS.contains(&t.as_str()) {
                return Err(Error::Vocab(format!("token {t:?} collides with a special symbol")));
            }
            all.push(t);
        }
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens: all, index })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn specials(&self) -> SpecialIds {
        SpecialIds::standard()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(SpecialIds::standard().unk)
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    /// All tokens after the specials, in id order.
    pub fn payload_tokens(&self) -> &[String] {
        &self.tokens[SPECIALS.len()..]
    }

    pub fn encode_tokens(&self, tokens: &[&str]) -> TokenSeq {
        TokenSeq::new(tokens.iter().map(|t| self.id_or_unk(t)).collect())
    }

    pub fn decode_tokens(&self, seq: &[TokenId]) -> Vec<String> {
        seq.iter().map(|&id| self.tokens[id].clone()).collect()
    }
}

/// Integer-encoded sentence. Carries no implicit BOS/EOS; consumers add them.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
}

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Self {
        TokenSeq { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn check_in_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.ids.iter().find(|&&id| id >= vocab_size) {
            None => Ok(()),
            Some(id) => Err(Error::Vocab(format!("token id {id} >= vocab size {vocab_size}"))),
        }
    }

    pub fn reversed(&self) -> TokenSeq {
        TokenSeq::new(self.ids.iter().rev().copied().collect())
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(ids: Vec<TokenId>) -> Self {
        TokenSeq::new(ids)
    }
}
