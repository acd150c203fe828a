//! Shape-constrained convex regression toolkit.
//!
//! Fits additive and multiplicative convex nonparametric least squares (CNLS)
//! under concavity/convexity, monotonicity, and linear-homogeneity
//! constraints; checks the exact sample orthogonality identities of the
//! fitted residuals; corrects endogeneity through 2SLS and a hybrid
//! IV/control-function second stage; and drives seeded Monte Carlo
//! experiments comparing the estimators.

pub mod data;
mod error;
pub mod model;
pub mod qp;

pub use data::Dataset;
pub use error::{Error, Result};
pub use model::{
    build_qp, fit_additive, fit_multiplicative, CnlsFit, Curvature, ErrorForm, ModelSpec,
    Monotonicity, Prediction,
};
pub use qp::{QpSolution, QuadraticProgram, SolveStatus, SolverConfig, SolverReport};
