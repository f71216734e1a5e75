use std::path::PathBuf;

use hinet_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum HinetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("structure error: {0}")]
    Structure(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("checkpoint version mismatch: file has version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("corrupt payload in {field}: {message}")]
    Corrupt { field: String, message: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("missing modality {modality} for subject {subject}")]
    MissingModality { subject: String, modality: String },
}

impl HinetError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn corrupt(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Corrupt {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Argument(_) => 2,
            Self::Numeric(_) => 4,
            _ => 3,
        }
    }
}

impl From<TensorError> for HinetError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Shape(msg) => Self::Dimension(msg),
        }
    }
}

pub type Result<T, E = HinetError> = std::result::Result<T, E>;
