use std::path::PathBuf;

/// Errors raised across the toolkit.
///
/// Every variant maps to a stable short code (see [`Error::code`]) that the
/// command-line front end prints so failures can be matched by scripts.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("inconsistent edit records: {0}")]
    Corruption(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("annotation error: {0}")]
    Annotation(String),

    #[error("sequence of {len} tokens exceeds the limit of {max}")]
    Overlength { len: usize, max: usize },

    #[error("non-finite loss at update {update}: {detail}")]
    NonFiniteLoss { update: u64, detail: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[cfg(feature = "model")]
    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// Machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "E_IO",
            Error::Parse { .. } => "E_PARSE",
            Error::Alignment(_) => "E_ALIGN",
            Error::Input(_) => "E_INPUT",
            Error::Config(_) => "E_CONFIG",
            Error::Corruption(_) => "E_CORRUPT",
            Error::Format(_) => "E_FORMAT",
            Error::Annotation(_) => "E_ANNOTATION",
            Error::Overlength { .. } => "E_OVERLENGTH",
            Error::NonFiniteLoss { .. } => "E_NONFINITE",
            Error::Json(_) => "E_JSON",
            #[cfg(feature = "model")]
            Error::Tensor(_) => "E_TENSOR",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
