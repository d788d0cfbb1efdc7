//! Case-sensitive whitespace tokenizer used by the synthetic backend.
//!
//! Each whitespace-separated word maps to `1 + fnv1a64(word) % (vocab - 1)`;
//! id 0 is reserved for the mask token. Lowercasing a capitalized word
//! therefore changes its id.

use crate::seed::fnv1a64;

pub const SYNTHETIC_VOCAB_SIZE: u32 = 4096;
pub const SYNTHETIC_MASK_TOKEN: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WhitespaceTokenizer {
    vocab_size: u32,
}

impl Default for WhitespaceTokenizer {
    fn default() -> Self {
        Self::new(SYNTHETIC_VOCAB_SIZE)
    }
}

impl WhitespaceTokenizer {
    pub fn new(vocab_size: u32) -> Self {
        assert!(vocab_size >= 2, "vocabulary needs room beyond the mask token");
        Self { vocab_size }
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn token_id(&self, word: &str) -> u32 {
        1 + (fnv1a64(word.as_bytes()) % u64::from(self.vocab_size - 1)) as u32
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.token_id(w)).collect()
    }
}
