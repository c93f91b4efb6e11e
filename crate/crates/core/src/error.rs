use thiserror::Error;

/// Errors surfaced by the planning toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("scene generation failed for family {family} seed {seed}: {reason}")]
    GenerationFailure {
        family: String,
        seed: u64,
        reason: String,
    },

    #[error("inconsistent model configuration: {0}")]
    BadConfig(String),

    #[error("non-finite value encountered in {context} (index {index})")]
    NonFinite { context: String, index: usize },

    #[error("format version mismatch: file has {found}, expected {expected}")]
    FormatVersion { found: u32, expected: u32 },

    #[error("truncated or corrupt input at record {record}: {reason}")]
    Truncated { record: usize, reason: String },

    #[error("architecture mismatch on load: {0}")]
    ArchMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    ConfigParse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
