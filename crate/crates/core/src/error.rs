use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error classes. The CLI maps these onto exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Integrity,
    Remote,
    Io,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("token {token} in document {document} is outside the vocabulary (size {vocab_size})")]
    TokenOutOfVocab {
        document: usize,
        token: u32,
        vocab_size: u32,
    },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("remote scoring transport failure (retryable): {0}")]
    RemoteTransport(String),

    #[error("malformed remote scoring response: {0}")]
    RemoteMalformed(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Invalid(_) | Error::TokenOutOfVocab { .. } | Error::Json(_) => {
                ErrorKind::Validation
            }
            Error::Integrity(_) => ErrorKind::Integrity,
            Error::RemoteTransport(_) | Error::RemoteMalformed(_) => ErrorKind::Remote,
            Error::Stage { source, .. } => source.kind(),
            Error::Io(_) => ErrorKind::Io,
        }
    }

    /// True for failures where repeating the same request may succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::RemoteTransport(_))
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
