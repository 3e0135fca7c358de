//! Desk-scale speculative decoding laboratory.
//!
//! Tabular softmax n-gram models play both the draft and the target role.
//! On top of them this crate provides the speculative propose/verify loop
//! with exact acceptance oracles ([`specdec`]), black-box and white-box
//! distillation of draft models offline and online ([`distill`]), and
//! synthetic chat-formatted domain corpora with controllable shift plus
//! self-synthesized training data ([`datagen`]).

pub mod datagen;
pub mod distill;
pub mod error;
pub mod lm;
pub mod seed;
pub mod specdec;

pub use error::{Error, Result};
pub use lm::{Distribution, SoftmaxTableLM, Token, Vocabulary, ASSISTANT, EOS, PAD, USER};
