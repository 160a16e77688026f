//! Multi-turn emotion-aware dialog generation.
//!
//! Three encoder-decoder models over a small reverse-mode autodiff core:
//! a flat attention seq2seq baseline (`S2S`), a hierarchical recurrent
//! attention network (`HRAN`), and `MEED`, which adds an emotion channel
//! driven by lexicon-derived per-utterance indicators and fused at the
//! output layer.

pub mod checkpoint;
pub mod corpus;
pub mod emotion;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod inference;
pub mod models;
pub mod pipeline;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
