use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("matrix of size {rows}x{cols} does not split into a {blocks}x{blocks} grid of {block_size}x{block_size} blocks")]
    NotDivisible {
        rows: usize,
        cols: usize,
        blocks: usize,
        block_size: usize,
    },

    #[error("dense Fisher block of dimension {dim} exceeds the materialisation limit {limit}")]
    SizeGuard { dim: usize, limit: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("value outside of domain: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn dims(
        context: &'static str,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
