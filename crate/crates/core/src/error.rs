use std::path::PathBuf;

/// Errors raised anywhere in the explainability pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file or payload. `offset` is the byte position where
    /// decoding stopped, when it is known.
    #[error("format error{}: {message}", offset.map(|o| format!(" at byte {o}")).unwrap_or_default())]
    Format {
        offset: Option<u64>,
        message: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The affinity graph has too little structure to be cut.
    #[error("degenerate graph: {0}")]
    DegenerateGraph(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid argument: {0}")]
    Domain(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(offset: Option<u64>, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    /// Input-side failures (bad files, bad shapes, bad flags) as opposed to
    /// model/backend failures. Used by the CLI to pick an exit code.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Format { .. }
                | Error::Shape(_)
                | Error::Config(_)
                | Error::Domain(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
