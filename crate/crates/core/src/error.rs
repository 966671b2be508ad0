//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A loss or gradient evaluated to a non-finite value.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Invalid model or run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Sequence does not fit the model context window.
    #[error("sequence length {got} exceeds context length {context}")]
    Length { got: usize, context: usize },

    /// PER is undefined for an empty reference.
    #[error("empty reference sequence")]
    EmptyReference,

    /// Argument outside its documented domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Token id not covered by the vocabulary.
    #[error("unknown token id {0}")]
    Vocab(u32),

    /// Samples could not be grouped by prompt.
    #[error("grouping error: {0}")]
    Grouping(String),

    /// Empty or malformed training batch.
    #[error("batch error: {0}")]
    Batch(String),

    /// Mismatched array lengths.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid rollout group.
    #[error("group error: {0}")]
    Group(String),

    /// Reports cannot be compared.
    #[error("comparability error: {0}")]
    Comparability(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
