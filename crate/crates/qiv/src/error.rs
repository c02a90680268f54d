//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by estimation, identification, and data handling.
#[derive(Debug, Clone, Error)]
pub enum QivError {
    /// An input value violates a domain restriction (probabilities, ranges).
    #[error("domain error: {0}")]
    Domain(String),

    /// Vector or matrix dimensions do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A named column was requested but does not exist.
    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    /// Dataset contents violate the schema (non-binary value, missing cell, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A design matrix is rank deficient.
    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    /// Logistic fit diverged; the data are (quasi-)separated.
    #[error("separation detected: {0}")]
    Separation(String),

    /// An iterative routine exhausted its iteration budget.
    #[error("did not converge: {0}")]
    NonConvergence(String),

    /// The quasi-instrument carries too little outcome signal to identify anything.
    #[error("weak quasi-instrument: {0}")]
    WeakQiv(String),

    /// A required stratum cell has no observations.
    #[error("empty cell: {0}")]
    EmptyCell(String),

    /// The dataset has no treated units, so the ATT is undefined.
    #[error("no treated units")]
    NoTreatedUnits,

    /// A fitted joint treatment/instrument probability fell below the positivity floor.
    #[error("positivity violation: {0}")]
    Positivity(String),

    /// A moment system is degenerate and cannot pin down its parameters.
    #[error("unidentified: {0}")]
    Unidentified(String),

    /// A covariance matrix required for a quadratic form is singular.
    #[error("singular covariance: {0}")]
    SingularCovariance(String),

    /// Unexpected numerical failure inside a solver; indicates a bug or
    /// catastrophically ill-conditioned input, never an ordinary data problem.
    #[error("internal numerical error: {0}")]
    Internal(String),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, QivError>;
