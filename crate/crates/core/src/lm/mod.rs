//! Vocabulary, distributions and the tabular softmax n-gram model.

mod distribution;
mod io;
mod model;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use distribution::Distribution;
pub use io::{load_model, read_model, save_model, write_model, MODEL_FORMAT_VERSION, MODEL_MAGIC};
pub use model::{SoftmaxTableLM, MAX_ORDER, MAX_TABLE_ENTRIES, SMOOTHING_FLOOR};

pub type Token = u32;

/// Start of a user turn.
pub const USER: Token = 0;
/// Start of the assistant turn.
pub const ASSISTANT: Token = 1;
pub const EOS: Token = 2;
/// Left padding for histories shorter than the model order.
pub const PAD: Token = 3;

pub const RESERVED: [Token; 4] = [USER, ASSISTANT, EOS, PAD];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct Vocabulary {
    size: usize,
}

impl Vocabulary {
    pub const MIN_SIZE: usize = 8;
    pub const MAX_SIZE: usize = 256;

    pub fn new(size: usize) -> Result<Self> {
        if !(Self::MIN_SIZE..=Self::MAX_SIZE).contains(&size) {
            return Err(Error::InvalidVocabulary(size));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn reserved(&self) -> [Token; 4] {
        RESERVED
    }

    /// Ids that are not role markers, EOS or padding.
    pub fn content(&self) -> Range<Token> {
        RESERVED.len() as Token..self.size as Token
    }

    pub fn is_reserved(token: Token) -> bool {
        (token as usize) < RESERVED.len()
    }

    pub fn check_token(&self, token: Token) -> Result<()> {
        if (token as usize) < self.size {
            Ok(())
        } else {
            Err(Error::InvalidToken { token, size: self.size })
        }
    }

    pub fn check(&self, tokens: &[Token]) -> Result<()> {
        tokens.iter().try_for_each(|&t| self.check_token(t))
    }
}

impl TryFrom<usize> for Vocabulary {
    type Error = Error;

    fn try_from(size: usize) -> Result<Self> {
        Self::new(size)
    }
}

impl From<Vocabulary> for usize {
    fn from(v: Vocabulary) -> usize {
        v.size
    }
}
