use thiserror::Error;

/// Errors surfaced by every module of the toolkit.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("insufficient matches: need {need}, got {got}")]
    InsufficientMatches { need: usize, got: usize },
    #[error("numeric error in {name}: {detail}")]
    Numeric { name: String, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parse error in {path} at byte {offset}: {detail}")]
    Parse {
        path: String,
        offset: u64,
        detail: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn numeric(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            name: name.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 configuration, 3 parse, 4 numeric,
    /// 5 insufficient data, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Parse { .. } => 3,
            Error::Numeric { .. } => 4,
            Error::InsufficientMatches { .. } | Error::DegenerateBatch(_) => 5,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
