use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {msg}", file.display())]
    Load { file: PathBuf, msg: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("token {0:?} is not in the vocabulary")]
    OutOfVocabulary(String),

    #[error("expected exactly one mask token, found {0}")]
    MaskCount(usize),

    #[error("sequence of length {len} exceeds the positional table ({max})")]
    SequenceTooLong { len: usize, max: usize },

    #[error("relation {0} has no base pattern")]
    MissingBasePattern(String),

    #[error("scorer {scorer}: {msg}")]
    Scorer { scorer: String, msg: String },

    #[error("bridge: {0}")]
    Bridge(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step} (loss = {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(file: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Load {
            file: file.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
