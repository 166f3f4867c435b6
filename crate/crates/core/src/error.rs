use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// The caller handed us something that violates a precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A CSV row could not be parsed; `line` is 1-based and counts the header.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
