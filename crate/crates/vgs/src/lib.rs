//! Visually grounded speech at desk scale.
//!
//! This crate trains a recurrent speech encoder and a linear image encoder
//! into a shared embedding space, using only image/caption pairing as
//! supervision, and then probes what the trained model knows about words:
//!
//! - [`dsp`]: MFCC feature extraction from raw audio.
//! - [`dataset`]: a synthetic grounded-speech corpus generator with exact
//!   word and phoneme alignments, plus JSONL persistence.
//! - [`model`]: the convolutional/recurrent speech encoder, the image
//!   projection, and cosine distance between the two.
//! - [`training`]: margin-based contrastive loss, reverse-mode gradients,
//!   and an Adam training loop with per-epoch retrieval metrics.
//! - [`retrieval`]: recall@k, median rank, and precision@k evaluation.
//! - [`gating`]: frame-truncation experiments and prefix activation curves
//!   with peak detection.
//! - [`competition`]: lexical competitor dynamics over word prefixes.
//! - [`factors`]: Spearman correlation of recognition accuracy against
//!   corpus statistics.
//!
//! Each capability has a runnable demo under `examples/`; start with
//! `cargo run --example generate_corpus` and `cargo run --example
//! train_model`. The `vgs` binary chains the same steps behind a small CLI.

pub mod autodiff;
pub mod competition;
pub mod containers;
pub mod dataset;
pub mod dsp;
pub mod factors;
pub mod gating;
pub mod model;
pub mod retrieval;
pub mod svg;
pub mod training;

use thiserror::Error;

/// Unified error type for corpus, model, and analysis operations.
#[derive(Debug, Error)]
pub enum VgsError {
    /// An input failed a documented precondition.
    #[error("invalid input: {0}")]
    Invalid(String),
    /// Operand shapes are inconsistent with each other or with the model.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A signal or feature sequence is shorter than the operation requires.
    #[error("input too short: {got} {unit}, need at least {need}")]
    TooShort {
        got: usize,
        need: usize,
        unit: &'static str,
    },
    /// A vector that must be normalized has zero (or non-finite) norm.
    #[error("degenerate embedding: norm is zero or not finite")]
    DegenerateEmbedding,
    /// A word is missing from the lexicon or the image annotations.
    #[error("unknown word: {0}")]
    UnknownWord(String),
    /// A stored file declares a format version this build does not read.
    #[error("unsupported {what} format version {found} (this build reads {supported})")]
    Version {
        what: &'static str,
        found: u32,
        supported: u32,
    },
    /// A stored file is malformed; `offset` is the byte position.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },
    /// The contrastive loss became non-finite for the given batch element.
    #[error("non-finite loss contribution at batch index {index}")]
    NonFiniteLoss { index: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VgsError>;
