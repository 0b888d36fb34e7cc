//! Deterministic hashed word-level tokenization.

use serde::{Deserialize, Serialize};

use super::CorpusError;

/// Token id of the leading classifier token.
pub const CLS_TOKEN: u32 = 0;
/// Token id of the trailing end token.
pub const END_TOKEN: u32 = 1;
/// Default hashed vocabulary size (including the two reserved ids).
pub const DEFAULT_VOCAB_SIZE: u32 = 32768;
/// Default cap on tokens per section, bounds included.
pub const DEFAULT_MAX_SECTION_TOKENS: usize = 128;

/// A tokenized section: `[CLS]`, word ids, `[END]`, truncated to the
/// configured maximum length.
#[derive(Clone, Debug, Eq, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Total, deterministic tokenizer: lowercase, split on non-alphanumeric
/// characters, hash each word into `[2, vocab_size)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Tokenizer {
    vocab_size: u32,
    max_section_tokens: usize,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer {
            vocab_size: DEFAULT_VOCAB_SIZE,
            max_section_tokens: DEFAULT_MAX_SECTION_TOKENS,
        }
    }
}

impl Tokenizer {
    pub fn new(vocab_size: u32, max_section_tokens: usize) -> Result<Self, CorpusError> {
        if vocab_size < 3 {
            return Err(CorpusError::BadTokenizerConfig(format!(
                "vocab_size must leave room for word ids beyond the 2 reserved tokens, got {vocab_size}"
            )));
        }
        if max_section_tokens < 2 {
            return Err(CorpusError::BadTokenizerConfig(format!(
                "max_section_tokens must fit the two boundary tokens, got {max_section_tokens}"
            )));
        }
        Ok(Tokenizer { vocab_size, max_section_tokens })
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn max_section_tokens(&self) -> usize {
        self.max_section_tokens
    }

    /// Id a single word maps to, in `[2, vocab_size)`.
    pub fn token_id(&self, word: &str) -> u32 {
        2 + (fnv1a64(word.as_bytes()) % (self.vocab_size as u64 - 2)) as u32
    }

    /// Tokenizes one section of text. Total: never fails, empty text yields
    /// exactly the two boundary tokens.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let mut tokens = Vec::with_capacity(16);
        tokens.push(CLS_TOKEN);
        let budget = self.max_section_tokens - 2;
        for word in split_words(text) {
            if tokens.len() > budget {
                break;
            }
            tokens.push(self.token_id(&word));
        }
        tokens.push(END_TOKEN);
        TokenSequence(tokens)
    }
}

/// Lowercased alphanumeric word segments of a text, in order.
fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

/// 64-bit FNV-1a over a byte string.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
