use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint corrupted: {0}")]
    Corruption(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Errors caused by user input (bad config, bad files) rather than bugs.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Training(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
