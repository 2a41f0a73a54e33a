use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    /// The pool has no examples left to score; the AL loop stops here.
    #[error("pool exhausted")]
    PoolExhausted,

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-readable tag, used in the experiment error log.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Parse { .. } => "parse",
            Error::Integrity(_) => "integrity",
            Error::DegenerateVariance(_) => "degenerate_variance",
            Error::PoolExhausted => "pool_exhausted",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }
}
