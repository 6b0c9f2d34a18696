//! Subword vocabulary, tokenization, and the transformer text encoder.

pub mod encoder;
pub mod tokenize;
pub mod vocab;

pub use encoder::{pooling_matrix, EncodedVars, TextEncoder, TextEncoderConfig, TextEncoderOutput};
pub use tokenize::{tokenize, EncodedText};
pub use vocab::{normalize_words, Vocab, CLS, PAD, SEP, UNK};
