//! Byte-level tokenizer.
//!
//! Ids `0..=255` are raw bytes. Four specials follow, and every id from
//! [`FIRST_CONTROL_ID`] up to the vocabulary size is reserved for control
//! tokens.

use crate::error::{invalid, Result};

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
/// Marks the end of the prompt and the start of the response.
pub const SEP: usize = 259;
pub const FIRST_CONTROL_ID: usize = 260;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tokenizer {
    vocab_size: usize,
}

impl Tokenizer {
    pub fn new(vocab_size: usize) -> Result<Self> {
        if vocab_size < FIRST_CONTROL_ID {
            return Err(invalid(format!("vocab_size {vocab_size} < {FIRST_CONTROL_ID}")));
        }
        Ok(Self { vocab_size })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn is_special(id: usize) -> bool {
        id >= BOS
    }

    /// Reserved control-token ids (possibly empty).
    pub fn control_ids(&self) -> std::ops::Range<usize> {
        FIRST_CONTROL_ID..self.vocab_size
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<usize> {
        bytes.iter().map(|&b| b as usize).collect()
    }

    /// Bytes of every non-special id, in order.
    pub fn decode_bytes(&self, ids: &[usize]) -> Vec<u8> {
        ids.iter().filter(|&&i| i < BOS).map(|&i| i as u8).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(ids)).into_owned()
    }

    /// `BOS prompt SEP`
    pub fn prompt_ids(&self, prompt: &str) -> Vec<usize> {
        let mut ids = Vec::with_capacity(prompt.len() + 2);
        ids.push(BOS);
        ids.extend(self.encode(prompt));
        ids.push(SEP);
        ids
    }

    /// `response EOS`
    pub fn response_ids(&self, response: &str) -> Vec<usize> {
        let mut ids = self.encode(response);
        ids.push(EOS);
        ids
    }
}
