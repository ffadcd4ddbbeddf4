use std::path::PathBuf;

/// Errors produced anywhere in the equalization pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is not positive definite (pivot {pivot}, value {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("matrix is not Hermitian (max asymmetry {0:e})")]
    NotHermitian(f64),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("instance too large for exhaustive search: {0} hypotheses")]
    TooLarge(u128),

    #[error("training aborted: non-finite loss at batch {batch} (learning rate {learning_rate:e})")]
    NonFiniteLoss { batch: usize, learning_rate: f64 },

    #[error("{path}:{line}: {message}")]
    Config {
        path: String,
        line: usize,
        message: String,
    },

    #[error("missing configuration key `{key}` in section [{section}]")]
    MissingKey { section: String, key: String },

    #[error("incompatible inputs: {0}")]
    Incompatible(String),

    #[error("unknown estimator tag `{0}`")]
    UnknownTag(String),

    #[error("empty roster")]
    EmptyRoster,

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code category used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. }
            | Error::MissingKey { .. }
            | Error::UnknownTag(_)
            | Error::EmptyRoster
            | Error::Incompatible(_)
            | Error::InvalidParameter(_) => 2,
            Error::Io(_) | Error::Format { .. } => 3,
            Error::NotPositiveDefinite { .. }
            | Error::NotHermitian(_)
            | Error::Numeric(_)
            | Error::NonFiniteLoss { .. } => 4,
            Error::Dimension(_) | Error::TooLarge(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
