use std::path::PathBuf;

/// Errors raised anywhere in the tracking stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("checkpoint version error: {0}")]
    Version(String),

    #[error("data error in {path}: {detail}")]
    Data { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code for the command-line front end:
    /// 2 for configuration problems, 3 for data problems, 4 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Version(_) | Error::Parameter(_) | Error::Usage(_) => 2,
            Error::Input(_) | Error::Data { .. } | Error::Io { .. } | Error::Pipeline(_) => 3,
            Error::Metric(_) => 3,
            Error::Shape { .. } => 2,
            Error::NonFinite { .. } | Error::Diverged { .. } => 4,
        }
    }
}
