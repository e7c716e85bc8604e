use thiserror::Error;

use crate::runtime::CommError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Comm(#[from] CommError),

    #[error("empty interface: every rank owns zero rows")]
    EmptyInterface,

    #[error("layout mismatch between interface vectors")]
    LayoutMismatch,

    #[error("global index {index} out of range for interface of size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("empty secant space: every increment column was filtered out")]
    EmptySecantSpace,

    #[error("singular U: diagonal entry {column} is numerically zero")]
    SingularU { column: usize },

    #[error("increment matrix has {columns} columns but the interface only has {rows} rows")]
    TooManyColumns { columns: usize, rows: usize },

    #[error("non-finite residual at coupling iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("non-finite input to problem evaluation")]
    NonFiniteInput,

    #[error("no reference solution available for {0}")]
    NoOracle(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),
}
