//! Tokenizer and transformer encoder with manual backpropagation.

mod backend;
pub mod nn;
mod tokenizer;
mod transformer;

pub use backend::{DeskBackend, EncoderBackend};
pub use tokenizer::{
    basic_tokenize, TokenSequence, Tokenizer, CLS, CLS_ID, MASK, MASK_ID, PAD, PAD_ID, SEP, SEP_ID, UNK, UNK_ID,
};
pub use transformer::{key_mask, Encoder, EncoderCache, EncoderConfig, EncoderLayer, EncoderOutput, Mode};
