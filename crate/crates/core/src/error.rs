use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed syllable `{0}`: expected lowercase letters followed by a tone digit 1-5")]
    MalformedSyllable(String),

    #[error("unknown syllable `{syllable}`: remainder `{remainder}` is not a known final")]
    UnknownSyllable { syllable: String, remainder: String },

    #[error("no pinyin entry for character `{0}`")]
    MissingPinyin(char),

    #[error("duplicate entry `{0}` in vocabulary")]
    DuplicateVocab(String),

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("sequence of length {len} exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("pronunciation heads do not match the configured granularity")]
    GranularityMismatch,

    #[error("fully adaptive weighting needs the target sentence")]
    MissingTarget,

    #[error("non-finite loss at step {step}: {detail}")]
    NaNLoss { step: usize, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
