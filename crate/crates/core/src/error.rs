use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A metric that has no value for the given trace (e.g. diversity with one chunk).
    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("backend error{}: {message}", if *.retryable { " (retryable)" } else { "" })]
    Backend { retryable: bool, message: String },

    /// Wire-protocol violations. These are fatal for a run.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("decode step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("line {line}: {message}")]
    Dataset { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Attaches a decode step index unless one is already present.
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            e @ Error::AtStep { .. } => e,
            e => Error::AtStep {
                step,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, looking through step annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn is_protocol(&self) -> bool {
        matches!(self.root(), Error::Protocol(_))
    }

    pub fn is_backend(&self) -> bool {
        matches!(self.root(), Error::Backend { .. } | Error::Protocol(_))
    }
}
