use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("cannot normalize row {row}: zero norm")]
    ZeroNorm { row: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("row alignment error: {0}")]
    Alignment(String),
    #[error("segment {attribute}={value} has {size} sample(s), {required} required")]
    InsufficientSegment {
        attribute: String,
        value: String,
        size: usize,
        required: usize,
    },
    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),
    #[error("confidence interval undefined: {0}")]
    UndefinedCi(String),
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed file {}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid user input (configs, manifests,
    /// contracts) rather than failures while running.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Stage { source, .. } => source.is_validation(),
            _ => matches!(
                self,
                Error::Config(_) | Error::Contract(_) | Error::Json(_) | Error::Format { .. }
            ),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
