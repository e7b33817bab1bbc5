//! Subjective-ground attention: per-annotator moral judgment prediction
//! with attention over an annotator's prior comments and over candidate
//! rules-of-thumb.
//!
//! The crate is organized bottom-up:
//!
//! - [`corpus`], [`lexicon`]: ingestion, judgment coding, moral-word scoring
//! - [`encoder`], [`autograd`], [`tensor`]: hashing tokenizer, static
//!   embedder, and a small trainable transformer with exact gradients
//! - [`cluster`], [`sgbase`]: topic clusters and per-annotator comment bases
//! - [`model`], [`train`]: attention variants, Adam, two-stage training
//! - [`eval`]: macro F1, cluster diagnostics and attention consistency
//! - [`synth`]: synthetic corpora with known persona profiles
//! - [`pipeline`]: the on-disk artifact layout used by the CLI

pub mod autograd;
pub mod checkpoint;
pub mod cluster;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod io;
pub mod lexicon;
pub mod model;
pub mod pipeline;
pub mod sgbase;
pub mod synth;
pub mod tensor;
pub mod train;

pub use corpus::{Corpus, JudgmentLabel, RuleOfThumb, Source, Split};
pub use error::{Error, Result};
pub use model::{AttentionTrace, ModelConfig, ModelParams, ModelVariant};
pub use tensor::Tensor;
