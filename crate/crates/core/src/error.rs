use thiserror::Error;

/// Errors surfaced by the segmentation stack.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor shapes disagree where they must match.
    #[error("shape mismatch: expected {expected:?}, got {got:?} ({context})")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
        context: String,
    },

    /// Configuration file problems: parse errors, unknown keys, dangling references.
    #[error("config error: {0}")]
    Config(String),

    /// Training produced a non-finite loss or another unrecoverable runtime state.
    #[error("runtime abort: {0}")]
    Runtime(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn shape(expected: &[usize], got: &[usize], context: &str) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            got: got.to_vec(),
            context: context.to_string(),
        }
    }
}
