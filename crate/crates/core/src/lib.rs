//! Subject-conditional relation detection as sequence generation.
//!
//! Given an image, a subject phrase and the subject's box, a transformer
//! encoder-decoder emits `relation object [@] x1 y1 x2 y2 [SEP]` sequences, one per
//! related object. The crate holds the tokenizer, a small autodiff engine and the
//! model, beam-search decoding, data tooling and the Recall@K evaluation.

pub mod autodiff;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
mod seed;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
pub use geometry::BoxPixels;
pub use seed::sub_seed;
pub use vocab::{Sentinel, TokenId, Tokenizer, Vocabulary};
