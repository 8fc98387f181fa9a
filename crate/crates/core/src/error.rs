use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum ErcError {
    /// A value violates the input domain of an operation.
    #[error("input domain error: {0}")]
    InputDomain(String),
    /// Every group of a batch was removed by dynamic sample filtering.
    #[error("empty batch: no unfiltered groups remain")]
    EmptyBatch,
    /// An operation that needs at least one record was given none.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    /// Configuration rejected, optionally with a 1-based line number.
    #[error("{}", fmt_config(.line, .message))]
    Config { line: Option<usize>, message: String },
    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn fmt_config(line: &Option<usize>, message: &str) -> String {
    match line {
        Some(l) => format!("config error at line {l}: {message}"),
        None => format!("config error: {message}"),
    }
}

impl ErcError {
    pub fn config(message: impl Into<String>) -> Self {
        ErcError::Config { line: None, message: message.into() }
    }

    pub fn config_at(line: usize, message: impl Into<String>) -> Self {
        ErcError::Config { line: Some(line), message: message.into() }
    }

    pub fn domain(message: impl Into<String>) -> Self {
        ErcError::InputDomain(message.into())
    }
}

pub type Result<T> = std::result::Result<T, ErcError>;
