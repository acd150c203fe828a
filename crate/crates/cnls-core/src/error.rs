use crate::qp::SolverReport;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input data violates a documented invariant (dimensions, finiteness, positivity).
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// A quadratic program violates its structural invariants.
    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    /// The QP solver did not reach an optimal solution.
    #[error("solver failed with status {status:?}: primal residual {primal_residual:.3e}, dual residual {dual_residual:.3e} after {iterations} iterations")]
    SolverFailure {
        status: crate::qp::SolveStatus,
        primal_residual: f64,
        dual_residual: f64,
        iterations: usize,
        report: Box<SolverReport>,
    },

    /// A regression design matrix is rank deficient.
    #[error("rank-deficient design: collinear columns {0:?}")]
    RankDeficient(Vec<String>),

    /// The Gauss-Newton loop for the multiplicative model could not keep the
    /// fitted values above the positivity floor.
    #[error("multiplicative fit: positivity floor violated and step damping exhausted at outer iteration {0}")]
    PositivityFloor(usize),

    /// Configuration rejected before any computation started.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
