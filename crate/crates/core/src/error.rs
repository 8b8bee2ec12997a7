//! Crate-wide error type.

/// Errors produced by map construction, file formats, training, and evaluation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition on the inputs was violated.
    #[error("{0}")]
    Invalid(String),

    /// Operand shapes are incompatible for the named operation.
    #[error("shape mismatch in {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A binary file failed to parse; `offset` is the byte position of the failure.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A configuration key is missing, unknown, or inconsistent.
    #[error("config error in [{section}] {key}: {message}")]
    Config {
        section: String,
        key: String,
        message: String,
    },

    /// Training produced a non-finite loss.
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },

    /// A scene spec cannot be satisfied (e.g. objects larger than any room).
    #[error("infeasible scene spec: {0}")]
    Infeasible(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn shape(context: impl Into<String>, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
