//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes do not conform for an operation; names both shapes.
    #[error("dimension mismatch in {op}: left is {lhs_rows}x{lhs_cols}, right is {rhs_rows}x{rhs_cols}")]
    Dimension {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    /// An argument is outside its valid domain (e.g. non-positive temperature).
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Invalid input data (empty bag, out-of-range label, width mismatch).
    #[error("invalid input: {0}")]
    Input(String),

    /// A stateful precondition does not hold (buffer not full, empty sub-queue).
    #[error("invalid state: {0}")]
    State(String),

    /// Training aborted (non-finite gradient or loss) with diagnostics.
    #[error("training error: {0}")]
    Training(String),

    /// Binary file format violation; names the byte offset.
    #[error("format error at offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Checkpoint load failure; names the offending section.
    #[error("checkpoint load error in section '{section}': {msg}")]
    Load { section: String, msg: String },

    /// Configuration rejected during validation.
    #[error("configuration error: {0}")]
    Config(String),

    /// Index out of range (e.g. batch mask outside the node matrix).
    #[error("index error: {0}")]
    Index(String),

    /// The finite-difference oracle produced a non-finite quotient.
    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Dimension {
            op,
            lhs_rows: lhs.0,
            lhs_cols: lhs.1,
            rhs_rows: rhs.0,
            rhs_cols: rhs.1,
        }
    }
}
