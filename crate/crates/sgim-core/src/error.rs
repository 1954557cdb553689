//! Error taxonomy shared by the whole pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor/matrix shapes, naming both sides.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A call violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// File or stream content is not in a supported format.
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A non-finite value surfaced where finite math was required.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An iterative routine ran out of budget before reaching its target.
    #[error("did not converge: {0}")]
    Convergence(String),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Process exit code for the CLI: 2 for I/O and format trouble,
    /// 3 for numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::UnsupportedFormat(_) | Error::Checkpoint(_) => 2,
            Error::Numerical(_) | Error::Convergence(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
