use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Symbols of the default character vocabulary, in id order. Digits come
/// first so that a digit's token id equals its value. End-of-sequence is
/// appended after these.
pub const DEFAULT_SYMBOLS: &str = "0123456789+-*=: Calcute";

/// Display name of the end-of-sequence token in vocabulary listings.
pub const EOS_NAME: &str = "<eos>";

/// Character-level tokenizer: one id per character plus a trailing
/// end-of-sequence id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<char>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new(DEFAULT_SYMBOLS).expect("default vocabulary is valid")
    }
}

impl Vocab {
    pub fn new(symbols: &str) -> Result<Self> {
        let symbols: Vec<char> = symbols.chars().collect();
        for (i, c) in symbols.iter().enumerate() {
            if symbols[..i].contains(c) {
                return Err(Error::InvalidArgument(format!("vocabulary repeats symbol {c:?}")));
            }
        }
        Ok(Self { symbols })
    }

    /// Number of ids, including end-of-sequence.
    pub fn len(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn eos(&self) -> u32 {
        self.symbols.len() as u32
    }

    pub fn symbols(&self) -> String {
        self.symbols.iter().collect()
    }

    pub fn id_of(&self, c: char) -> Option<u32> {
        self.symbols.iter().position(|&s| s == c).map(|i| i as u32)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        text.char_indices()
            .map(|(offset, symbol)| self.id_of(symbol).ok_or(Error::UnknownSymbol { symbol, offset }))
            .collect()
    }

    /// Inverse of [`Vocab::tokenize`]. End-of-sequence has no text form.
    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        ids.iter()
            .map(|&id| {
                self.symbols
                    .get(id as usize)
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("token id {id} has no text form")))
            })
            .collect()
    }

    /// Token strings in id order, end-of-sequence included.
    pub fn listing(&self) -> Vec<String> {
        self.symbols
            .iter()
            .map(|c| c.to_string())
            .chain(std::iter::once(EOS_NAME.to_string()))
            .collect()
    }

    /// Hex SHA-256 over the newline-joined listing.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.listing().join("\n").as_bytes()))
    }
}
