use std::path::PathBuf;

use thiserror::Error;

use crate::corpus::CodeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("text produced no tokens")]
    EmptyAfterTokenize,

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate id {0}")]
    DuplicateId(CodeId),

    #[error("empty sequence")]
    EmptySequence,

    #[error("sequence of length {len} exceeds limit {limit}")]
    SequenceTooLong { len: usize, limit: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("attention row {0} is fully masked")]
    AllMaskedRow(usize),

    #[error("non-finite score {0}")]
    NonFiniteScore(f64),

    #[error("need at least {needed} candidates in the sampling window, found {available}")]
    InsufficientCandidates { needed: usize, available: usize },

    #[error("start rank {start} is beyond the {available} non-gold candidates")]
    StartBeyondCorpus { start: usize, available: usize },

    #[error("codebase is empty")]
    EmptyCodebase,

    #[error("code {id} could not be encoded: {source}")]
    Unencodable {
        id: CodeId,
        #[source]
        source: Box<Error>,
    },

    #[error("gold code {0} is not in the codebase")]
    MissingGold(CodeId),

    #[error("nothing to evaluate")]
    EmptyEvaluation,

    #[error("malformed file: {0}")]
    Format(String),

    #[error("index fingerprint {index} does not match checkpoint {model}")]
    FingerprintMismatch { index: String, model: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
