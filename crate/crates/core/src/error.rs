use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("architecture audit failed: {}", .0.join("; "))]
    ArchMismatch(Vec<String>),

    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("sequence length {len} exceeds context {context}")]
    SequenceTooLong { len: usize, context: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("corpus too short: {0}")]
    CorpusTooShort(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at step {step}: {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("trim error: {0}")]
    Trim(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing dependency: {}", .0.display())]
    MissingDependency(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
