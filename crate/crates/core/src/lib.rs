//! Desk-scale two-speaker podcast speech generation.
//!
//! The numerical modules are generic over [`Scalar`] (`f32` / `f64`); the
//! aliases at the bottom of this file fix the element type for callers that
//! do not care.

pub mod codec;
pub mod container;
pub mod corpus;
pub mod detok;
pub mod error;
pub mod graph;
pub mod lm;
pub mod nn;
pub mod params;
mod scalar;
pub mod sequence;
pub mod tokenizer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Codec = codec::SemanticCodec<f32>;
pub type Codebook = codec::Codebook<f32>;
pub type Features = codec::FeatureSequence<f32>;
pub type LanguageModel = lm::TextToSemantic<f32>;
pub type Detok = detok::Detokenizer<f32>;
pub type DetokCache = detok::DetokCache<f32>;
