use thiserror::Error;

/// Errors raised anywhere in the model, corpus, training or checkpoint code.
#[derive(Debug, Error)]
pub enum AwiError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("vocabulary error: token id {id} out of range for vocabulary of size {size}")]
    Vocabulary { id: usize, size: usize },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("corpus format error at line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("corpus format error: {0}")]
    Corpus(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = AwiError> = std::result::Result<T, E>;

impl AwiError {
    pub(crate) fn shapes(what: &str, a: (usize, usize), b: (usize, usize)) -> Self {
        AwiError::Dimension(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
    }
}
