use std::path::PathBuf;

/// Errors raised anywhere in the synthesis pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A NIfTI header or payload could not be decoded.
    #[error("malformed NIfTI file: field `{field}`: {reason}")]
    Nifti { field: &'static str, reason: String },

    /// The file is a valid container but uses a feature this crate does not read.
    #[error("unsupported format: {0}")]
    Unsupported(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A loss term or intermediate value became NaN or infinite.
    #[error("non-finite value in `{term}`")]
    NonFinite { term: String },

    /// Training diverged; the last finite parameters were saved to `checkpoint`.
    #[error("training diverged at iteration {iteration} (`{term}` non-finite); last good checkpoint: {}", .checkpoint.display())]
    Diverged {
        iteration: usize,
        term: String,
        checkpoint: PathBuf,
    },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("I/O error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {}: {source}", .path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
