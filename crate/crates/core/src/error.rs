/// Error type shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes of two inputs do not agree (matrix dims, particle counts, ...).
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// A scalar or structural argument is outside its admissible range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A matrix required to be symmetric positive definite is not.
    #[error("not symmetric positive definite: {0}")]
    NotSpd(String),
    /// A documented precondition of an operation does not hold for the input.
    /// Reported to the caller, never repaired silently.
    #[error("precondition violated: {0}")]
    Precondition(String),
    /// NaN or infinity reached an operation that requires finite input.
    #[error("non-finite input: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;
