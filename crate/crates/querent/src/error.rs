//! Error type shared by every module.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up (matmul, projections, block loads).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A caller-supplied value is out of its documented range.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// An operation that needs at least one row/member got none.
    #[error("empty region: {0}")]
    EmptyRegion(String),

    /// A serialized bag or checkpoint is malformed; `offset` is the byte
    /// position at which decoding failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Statistically meaningless input (e.g. zero variance where a
    /// correlation is requested).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A theory configuration violates one of its admissibility conditions;
    /// the message names the condition.
    #[error("infeasible configuration: {0}")]
    Infeasible(String),

    /// Non-finite value produced where the contract promises finite output.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the command-line front end.
    /// 2 = configuration, 3 = data, 4 = numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Param(_) | Error::Infeasible(_) => 2,
            Error::Shape(_)
            | Error::EmptyRegion(_)
            | Error::Format { .. }
            | Error::Degenerate(_)
            | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}
