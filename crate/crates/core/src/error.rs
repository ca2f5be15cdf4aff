use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("empty loss: every row is ignored")]
    EmptyLoss,
    #[error("token id {id} is outside the vocabulary of {vocab}")]
    UnknownToken { id: u32, vocab: usize },
    #[error("source `{0}` has no documents")]
    EmptySource(String),
    #[error("corpus exhausted after {0} documents and cycling is disabled")]
    CorpusExhausted(usize),
    #[error("sequence of length {len} exceeds the usable position range {max}")]
    TooLong { len: usize, max: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad input (config, flags, missing files) rather than
    /// by something going wrong while running.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config(_) | Error::UnknownKey(_) | Error::Invalid(_) => true,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        }
    }
}
