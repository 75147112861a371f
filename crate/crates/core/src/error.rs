use thiserror::Error;

/// Errors raised anywhere in the scan pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid aggregate: {0}")]
    InvalidAggregate(String),
    #[error("invalid subset: {0}")]
    InvalidSubset(String),
    #[error("matrix decomposition failed: {0}")]
    Decomposition(String),
    #[error("GP conditioning failed: {0}")]
    Conditioning(String),
    #[error("hyperparameter optimization failed: {0}")]
    Optimization(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("ingestion error: {0}")]
    Ingestion(String),
    #[error("baseline lookup error: {0}")]
    Lookup(String),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_) => 2,
            Error::Ingestion(_) | Error::Lookup(_) => 3,
            Error::InvalidAggregate(_)
            | Error::InvalidSubset(_)
            | Error::Decomposition(_)
            | Error::Conditioning(_)
            | Error::Optimization(_) => 4,
            Error::Io(_) | Error::Serialization(_) => 5,
            Error::Context { .. } => unreachable!(),
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Ingestion(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
