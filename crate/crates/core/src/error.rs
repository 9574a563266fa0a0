//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`] with a dedicated error variant
//! rather than panicking, so the Monte Carlo harness can attach run context
//! (run index, seed) to any failure before it surfaces.

use thiserror::Error;

/// Errors produced by the estimation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A kernel parameter is out of its admissible range.
    #[error("invalid kernel configuration: {0}")]
    InvalidKernel(String),

    /// A numeric input was NaN or infinite where a finite value is required.
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    /// Vector/matrix dimensions do not agree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An operation that needs at least one sample received none.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Influence function requested at a point where it is undefined
    /// (zero error with shape parameter at or below one).
    #[error("influence undefined at e = 0 for alpha <= 1")]
    UndefinedInfluence,

    /// Cholesky factorization failed even after the jitter retries.
    #[error("Cholesky factorization failed for {0} after jitter retries")]
    CholeskyFailure(&'static str),

    /// The (possibly reweighted) innovation covariance is singular.
    #[error("singular innovation covariance")]
    SingularInnovation,

    /// A matrix expected to be symmetric is not, within tolerance.
    #[error("matrix is not symmetric within tolerance")]
    NonSymmetric,

    /// A quadratic form needed strictly positive minimum eigenvalue.
    #[error("rank-deficient or indefinite matrix: {0}")]
    RankDeficient(String),

    /// A model or configuration failed validation.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Observer gain produces an unstable error dynamics matrix.
    #[error("unstable observer: spectral radius {0} >= 1")]
    UnstableObserver(f64),

    /// Numerical quadrature did not reach the requested tolerance.
    #[error("quadrature failure: {0}")]
    QuadratureFailure(String),

    /// Root search or iterative fit exceeded its iteration cap.
    #[error("iteration cap exceeded: {0}")]
    NonConvergence(String),

    /// A Monte Carlo run failed; carries replay context.
    #[error("run {run_index} (seed {seed}) failed: {source}")]
    RunFailure {
        /// Index of the failing run within the batch.
        run_index: usize,
        /// Base seed of the batch, for replay.
        seed: u64,
        /// Underlying error.
        #[source]
        source: Box<Error>,
    },

    /// Configuration file or report serialization problem.
    #[error("serialization: {0}")]
    Serialization(#[from] serde_json::Error),

    /// File system problem while reading configs or writing reports.
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
