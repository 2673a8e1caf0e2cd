//! Small causal language model with image-prefix alignment.

pub mod lora;
mod model;
mod vocab;

pub use lora::{lora_apply, LoraAdapter, LoraConfig, LoraLinear};
pub use model::{argmax_first, LanguageModel, LmConfig, LmExample, LM_PREFIX, LORA_PREFIX};
pub use vocab::{tokenize, Vocab, BOS, EOS, PAD, SPECIALS, UNK};
