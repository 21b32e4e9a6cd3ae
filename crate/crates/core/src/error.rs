use thiserror::Error;

/// Errors produced by the engine.
///
/// The variants map onto the CLI exit codes: `Io` and `Format` exit with 2,
/// everything else with 1.
#[derive(Debug, Error)]
pub enum CcdError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error")]
    Io(#[from] std::io::Error),
}

impl CcdError {
    pub fn dim(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        CcdError::Dimension { op, lhs, rhs }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        CcdError::Validation(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        CcdError::Contract(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        CcdError::Numeric(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        CcdError::Format(msg.into())
    }

    /// True for errors that originate from the filesystem or file contents.
    pub fn is_io_or_format(&self) -> bool {
        matches!(self, CcdError::Io(_) | CcdError::Format(_))
    }
}

impl From<serde_json::Error> for CcdError {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            CcdError::Io(e.into())
        } else {
            CcdError::Format(e.to_string())
        }
    }
}

pub type Result<T> = std::result::Result<T, CcdError>;
