use std::path::PathBuf;

/// Errors raised anywhere in the inference stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("mask row {row} has no allowed entries")]
    DegenerateMask { row: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid config field `{field}`: {detail}")]
    Config { field: &'static str, detail: String },

    #[error("unsupported wav {field}: {detail}")]
    WavFormat { field: &'static str, detail: String },

    #[error("chunking error: {0}")]
    Chunking(String),

    #[error("session error: {0}")]
    Session(String),

    #[error("state error: {0}")]
    State(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("infeasible latency: {0}")]
    Feasibility(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file: {0}")]
    Malformed(String),
}

impl Error {
    /// Short stable identifier printed as the prefix of CLI error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "E_SHAPE",
            Error::DegenerateMask { .. } => "E_MASK",
            Error::NonFinite { .. } => "E_NONFINITE",
            Error::Config { .. } => "E_CONFIG",
            Error::WavFormat { .. } => "E_FORMAT",
            Error::Chunking(_) => "E_CHUNKING",
            Error::Session(_) => "E_SESSION",
            Error::State(_) => "E_STATE",
            Error::Argument(_) => "E_ARGUMENT",
            Error::Feasibility(_) => "E_FEASIBILITY",
            Error::File { .. } => "E_FILE",
            Error::Malformed(_) => "E_MALFORMED",
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(field: &'static str, detail: impl Into<String>) -> Self {
        Error::Config {
            field,
            detail: detail.into(),
        }
    }

    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
