use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("cosine similarity undefined for zero-norm vector")]
    UndefinedSimilarity,

    #[error("fusion undefined: both precisions are zero")]
    UndefinedFusion,

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("empty ground truth volume")]
    EmptyGroundTruth,

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Short machine-readable kind, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::UndefinedSimilarity => "undefined_similarity",
            Error::UndefinedFusion => "undefined_fusion",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::EmptyGroundTruth => "empty_ground_truth",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
