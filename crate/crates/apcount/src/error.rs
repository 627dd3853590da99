use thiserror::Error;

/// Failure modes shared by every module. Validation problems are reported
/// through these variants rather than panics so the CLI can map them to
/// exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("{0} is not prime")]
    NotPrime(u64),

    #[error("{0} is not squarefree")]
    NotSquarefree(u64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A structural precondition of a specialized code path is not met
    /// (wrong degree, wrong shape, missing variable, ...).
    #[error("structural precondition not met: {0}")]
    Structure(String),

    /// Refusal issued before starting an enumeration whose estimated cost
    /// exceeds the configured ceiling.
    #[error("estimated cost {estimated} elementary steps exceeds budget ceiling {ceiling}")]
    BudgetExceeded { estimated: u128, ceiling: u128 },

    #[error("inadmissible residue: {0}")]
    InadmissibleResidue(String),
}

pub type Result<T> = std::result::Result<T, Error>;
