//! Byte-level tokenizer.
//!
//! Every UTF-8 byte maps to the token with the same id, so tokenization is
//! total and concatenation-compatible: `tokenize(a + b) == tokenize(a) + tokenize(b)`.
//! That property is what lets a source's token span be computed independently
//! and still line up inside the full prompt.

use serde::{Deserialize, Serialize};

pub type TokenId = u32;

/// Number of byte tokens.
pub const BYTE_VOCAB: usize = 256;
pub const BOS: TokenId = 256;
pub const EOS: TokenId = 257;
/// Smallest vocabulary able to hold the bytes and both specials.
pub const MIN_VOCAB: usize = 258;

/// Identifier compared when checking that a proxy and a target share ids.
pub const TOKENIZER_ID: &str = "byte-level-v1";

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Self(tokens)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[TokenId] {
        &self.0
    }

    pub fn extend_from(&mut self, other: &TokenSeq) {
        self.0.extend_from_slice(&other.0);
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(tokens: Vec<TokenId>) -> Self {
        Self(tokens)
    }
}

impl std::ops::Deref for TokenSeq {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

pub fn tokenize(text: &str) -> TokenSeq {
    TokenSeq(text.bytes().map(TokenId::from).collect())
}

/// Bytes of the non-special tokens, in order.
pub fn detokenize_bytes(tokens: &[TokenId]) -> Vec<u8> {
    tokens
        .iter()
        .filter(|&&t| (t as usize) < BYTE_VOCAB)
        .map(|&t| t as u8)
        .collect()
}

/// Decodes byte tokens back to text, replacing invalid UTF-8 and dropping specials.
pub fn detokenize(tokens: &[TokenId]) -> String {
    String::from_utf8_lossy(&detokenize_bytes(tokens)).into_owned()
}
