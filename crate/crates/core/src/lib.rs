//! Synthetic-scanpath augmented text classification.
//!
//! A scanpath generator predicts fixation sequences over input words; a
//! Gumbel-softmax bridge keeps the sampled fixations differentiable; and a
//! scanpath-augmented classifier encodes token embeddings reordered by
//! fixation order with a GRU. The whole pipeline trains end to end on the
//! small reverse-mode autodiff engine in [`graph`].

pub mod augmentor;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod gazegen;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod textenc;
pub mod trainkit;

pub use error::{Error, Result};
