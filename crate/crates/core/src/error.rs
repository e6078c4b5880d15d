use std::path::PathBuf;

/// Errors produced by every stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed array file or header.
    #[error("format error: {0}")]
    Format(String),

    /// Array file with a payload type other than little-endian f32/f64.
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),

    /// Shapes or lengths that do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Input that is structurally valid but numerically degenerate
    /// (empty sets, zero-norm vectors, too few prototypes).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A parameter outside its admissible domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Clustering was requested for a class whose bank holds nothing.
    #[error("support bank for class {0} is empty")]
    EmptyBank(usize),

    /// Positiveness was requested against an empty candidate set.
    #[error("candidate set is empty")]
    EmptyCandidates,

    /// Non-finite value encountered where finite data is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the file system rather than by the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
