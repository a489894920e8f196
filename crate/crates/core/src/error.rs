use std::path::PathBuf;

use crate::model::Variant;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("input too small: {0}")]
    Size(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("not a weight file (bad magic bytes)")]
    BadMagic,

    #[error("unsupported weight format version {0}")]
    UnsupportedVersion(u32),

    #[error("weight file is truncated")]
    Truncated,

    #[error("weight file is malformed: {0}")]
    Malformed(String),

    #[error("tensor shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("variant mismatch: weights are for {found}, expected {expected}")]
    VariantMismatch { expected: Variant, found: Variant },

    #[error("manifest `{path}` line {line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("image `{path}`: {message}")]
    Image { path: PathBuf, message: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Image { .. } | Error::Manifest { .. } => 3,
            _ => 4,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(source: std::io::Error) -> Self {
        Error::io("i/o error", source)
    }
}
