use std::path::PathBuf;

/// Crate-wide error type. Variants map onto process exit codes: validation
/// and contract failures exit 2, numeric failures 3, IO failures 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dim(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid spec: {0}")]
    Spec(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),

    #[error("segmentation failed: {0}")]
    Segmentation(String),

    #[error("poisoned numeric state: {0}")]
    Poisoned(String),

    #[error("map inversion failed: {0}")]
    Inversion(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad file format in {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code for the CLI: 2 validation, 3 numeric, 4 IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dim(_)
            | Error::Geometry(_)
            | Error::Contract(_)
            | Error::Spec(_)
            | Error::Validation(_)
            | Error::Checkpoint(_)
            | Error::Segmentation(_) => 2,
            Error::Poisoned(_) | Error::Inversion(_) => 3,
            Error::Io { .. } | Error::Format { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
