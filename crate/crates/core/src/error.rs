use std::path::PathBuf;

/// Errors raised by the splatting pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An input parameter lies outside the domain of the operation.
    #[error("parameter domain error: {0}")]
    ParameterDomain(String),

    /// A computation produced a non-finite or degenerate value.
    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    /// A caller violated an operation's contract (shapes, ordering, ranges).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training produced non-finite values and was stopped.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A file did not follow its documented format.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }
}
