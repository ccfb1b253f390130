use thiserror::Error;
use xmodal_tensor::TensorError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("config syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("config error in [{section}] `{key}`: {message}")]
    Config {
        section: String,
        key: String,
        message: String,
    },

    #[error("unknown {stage} module `{name}`; registered: {available}")]
    UnknownModule {
        stage: String,
        name: String,
        available: String,
    },

    #[error("{stage} module `{name}` is already registered")]
    DuplicateModule { stage: String, name: String },

    #[error("dimension mismatch: {left} = {left_dim} but {right} = {right_dim}")]
    DimensionMismatch {
        left: String,
        left_dim: usize,
        right: String,
        right_dim: usize,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("checkpoint was written for config hash {found:016x}, current config hashes to {expected:016x}")]
    ConfigHashMismatch { expected: u64, found: u64 },

    #[error("non-finite loss at step {step}: {message}")]
    Numeric { step: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(section: &str, key: &str, message: impl Into<String>) -> Self {
        Error::Config {
            section: section.to_string(),
            key: key.to_string(),
            message: message.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures caused by numerics rather than by the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric { .. } | Error::Tensor(TensorError::NonFinite(_) | TensorError::Domain { .. })
        )
    }
}
