//! Dense convex quadratic programming with an operator-splitting method and
//! active-set polish.
//!
//! Problems have the form
//!
//! ```text
//!     minimize    1/2 x' P x + q' x
//!     subject to  l <= A x <= u
//! ```
//!
//! with P symmetric positive semidefinite. Equality rows are encoded as
//! `l[j] == u[j]` and one-sided rows use infinite bounds. The solver returns
//! dual multipliers for every row; the polish step re-solves the KKT system on
//! the detected active set to push residuals down to ~1e-10.

mod admm;
mod polish;
mod ruiz;
mod sparse;

pub use sparse::RowMatrix;

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Relative tolerance for the symmetry check on the objective matrix.
const SYMMETRY_TOL: f64 = 1e-12;

/// Diagonal shift applied to marginally indefinite objective matrices.
/// Anything with a smaller eigenvalue than -PSD_SHIFT is rejected.
const PSD_SHIFT: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    MaxIterations,
    Infeasible,
    Unbounded,
}

/// A dense convex QP. Constructed through [`QuadraticProgram::new`], which
/// validates symmetry, bound ordering, and positive semidefiniteness.
#[derive(Debug, Clone)]
pub struct QuadraticProgram {
    objective_matrix: DMatrix<f64>,
    objective_vector: Vec<f64>,
    constraint_matrix: RowMatrix,
    lower_bounds: Vec<f64>,
    upper_bounds: Vec<f64>,
    variable_names: Vec<String>,
}

impl QuadraticProgram {
    pub fn new(
        objective_matrix: DMatrix<f64>,
        objective_vector: Vec<f64>,
        constraint_matrix: RowMatrix,
        lower_bounds: Vec<f64>,
        upper_bounds: Vec<f64>,
        variable_names: Vec<String>,
    ) -> Result<Self> {
        let d = objective_vector.len();
        let m = constraint_matrix.nrows();
        if objective_matrix.nrows() != d || objective_matrix.ncols() != d {
            return Err(Error::InvalidProblem(format!(
                "objective matrix is {}x{} but the objective vector has length {d}",
                objective_matrix.nrows(),
                objective_matrix.ncols()
            )));
        }
        if constraint_matrix.ncols() != d {
            return Err(Error::InvalidProblem(format!(
                "constraint matrix has {} columns for {d} variables",
                constraint_matrix.ncols()
            )));
        }
        if lower_bounds.len() != m || upper_bounds.len() != m {
            return Err(Error::InvalidProblem(format!(
                "bound vectors have lengths {}/{} for {m} constraint rows",
                lower_bounds.len(),
                upper_bounds.len()
            )));
        }
        if variable_names.len() != d {
            return Err(Error::InvalidProblem(format!(
                "{} variable names for {d} variables",
                variable_names.len()
            )));
        }
        let mut scale = 1.0f64;
        for v in objective_matrix.iter() {
            if !v.is_finite() {
                return Err(Error::InvalidProblem("non-finite objective matrix entry".into()));
            }
            scale = scale.max(v.abs());
        }
        for i in 0..d {
            for j in (i + 1)..d {
                let diff = (objective_matrix[(i, j)] - objective_matrix[(j, i)]).abs();
                if diff > SYMMETRY_TOL * scale {
                    return Err(Error::InvalidProblem(format!(
                        "objective matrix asymmetric at ({i},{j}): |{} - {}| > {:.1e}",
                        objective_matrix[(i, j)],
                        objective_matrix[(j, i)],
                        SYMMETRY_TOL * scale
                    )));
                }
            }
        }
        if objective_vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidProblem("non-finite objective vector entry".into()));
        }
        for j in 0..m {
            let (l, u) = (lower_bounds[j], upper_bounds[j]);
            if l.is_nan() || u.is_nan() || l == f64::INFINITY || u == f64::NEG_INFINITY {
                return Err(Error::InvalidProblem(format!("invalid bounds on row {j}: [{l}, {u}]")));
            }
            if l > u {
                return Err(Error::InvalidProblem(format!(
                    "row {j} has lower bound {l} above upper bound {u}"
                )));
            }
            for &(_, v) in constraint_matrix.row(j) {
                if !v.is_finite() {
                    return Err(Error::InvalidProblem(format!("non-finite constraint entry in row {j}")));
                }
            }
        }

        // Symmetrize exactly, then repair marginal indefiniteness.
        let mut p = objective_matrix;
        for i in 0..d {
            for j in (i + 1)..d {
                let avg = 0.5 * (p[(i, j)] + p[(j, i)]);
                p[(i, j)] = avg;
                p[(j, i)] = avg;
            }
        }
        repair_psd(&mut p)?;

        Ok(Self {
            objective_matrix: p,
            objective_vector,
            constraint_matrix,
            lower_bounds,
            upper_bounds,
            variable_names,
        })
    }

    pub fn num_variables(&self) -> usize {
        self.objective_vector.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.constraint_matrix.nrows()
    }

    pub fn objective_matrix(&self) -> &DMatrix<f64> {
        &self.objective_matrix
    }

    pub fn objective_vector(&self) -> &[f64] {
        &self.objective_vector
    }

    pub fn constraint_matrix(&self) -> &RowMatrix {
        &self.constraint_matrix
    }

    pub fn lower_bounds(&self) -> &[f64] {
        &self.lower_bounds
    }

    pub fn upper_bounds(&self) -> &[f64] {
        &self.upper_bounds
    }

    pub fn variable_names(&self) -> &[String] {
        &self.variable_names
    }

    pub fn is_equality_row(&self, j: usize) -> bool {
        self.lower_bounds[j] == self.upper_bounds[j]
    }

    /// 1/2 x'Px + q'x
    pub fn objective_value(&self, x: &[f64]) -> f64 {
        let mut quad = 0.0;
        for i in 0..self.num_variables() {
            let mut row = 0.0;
            for j in 0..self.num_variables() {
                row += self.objective_matrix[(i, j)] * x[j];
            }
            quad += x[i] * row;
        }
        0.5 * quad + self.objective_vector.iter().zip(x).map(|(q, xi)| q * xi).sum::<f64>()
    }

    /// Mutate the bounds of one row. Used by the CNLS builders to retarget the
    /// regression-equation rows between Gauss-Newton iterations without
    /// rebuilding the Afriat block.
    pub(crate) fn set_row_bounds(&mut self, j: usize, lower: f64, upper: f64) {
        debug_assert!(lower <= upper);
        self.lower_bounds[j] = lower;
        self.upper_bounds[j] = upper;
    }

    /// Mutate one diagonal entry of the objective matrix (observation weights).
    pub(crate) fn set_diagonal(&mut self, i: usize, v: f64) {
        debug_assert!(v >= 0.0);
        self.objective_matrix[(i, i)] = v;
    }

    /// Mutate one constraint coefficient.
    pub(crate) fn set_row_entry(&mut self, row: usize, col: usize, v: f64) {
        self.constraint_matrix.set_entry(row, col, v);
    }

    /// Dump the problem in a plain-text format for offline cross-checking.
    ///
    /// Format:
    /// ```text
    /// qp d=<d> m=<m>
    /// P <d lines of d space-separated values, row-major>
    /// q <one line of d values>
    /// A  (m lines: "<lower> <upper> : <col>:<val> <col>:<val> ...")
    /// ```
    pub fn write_debug<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        let d = self.num_variables();
        writeln!(w, "qp d={} m={}", d, self.num_constraints())?;
        writeln!(w, "P")?;
        for i in 0..d {
            let row: Vec<String> = (0..d).map(|j| format!("{:?}", self.objective_matrix[(i, j)])).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        let q: Vec<String> = self.objective_vector.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "q\n{}", q.join(" "))?;
        writeln!(w, "A")?;
        for j in 0..self.num_constraints() {
            let entries: Vec<String> = self
                .constraint_matrix
                .row(j)
                .iter()
                .map(|(c, v)| format!("{c}:{v:?}"))
                .collect();
            writeln!(w, "{:?} {:?} : {}", self.lower_bounds[j], self.upper_bounds[j], entries.join(" "))?;
        }
        Ok(())
    }
}

/// Reject objective matrices with an eigenvalue below -1e-10; shift the
/// diagonal by +1e-10 when the smallest eigenvalue is marginally negative.
fn repair_psd(p: &mut DMatrix<f64>) -> Result<()> {
    let d = p.nrows();
    let is_diagonal = (0..d).all(|i| (0..d).all(|j| i == j || p[(i, j)] == 0.0));
    if is_diagonal {
        let min_diag = (0..d).map(|i| p[(i, i)]).fold(f64::INFINITY, f64::min);
        if d == 0 || min_diag >= 0.0 {
            return Ok(());
        }
        if min_diag > -PSD_SHIFT {
            for i in 0..d {
                p[(i, i)] += PSD_SHIFT;
            }
            return Ok(());
        }
        return Err(Error::InvalidProblem(format!(
            "objective matrix has diagonal entry {min_diag:.3e} below -{PSD_SHIFT:.0e}"
        )));
    }
    if d <= 128 {
        let min_eig = p
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .fold(f64::INFINITY, |m, &v| m.min(v));
        if min_eig >= 0.0 {
            return Ok(());
        }
        if min_eig > -PSD_SHIFT {
            for i in 0..d {
                p[(i, i)] += PSD_SHIFT;
            }
            return Ok(());
        }
        return Err(Error::InvalidProblem(format!(
            "objective matrix has eigenvalue {min_eig:.3e} below -{PSD_SHIFT:.0e}"
        )));
    }
    // Large matrices: Cholesky probes instead of a full eigendecomposition.
    if nalgebra::Cholesky::new(p.clone()).is_some() {
        return Ok(());
    }
    let mut shifted = p.clone();
    for i in 0..d {
        shifted[(i, i)] += PSD_SHIFT;
    }
    if nalgebra::Cholesky::new(shifted).is_some() {
        for i in 0..d {
            p[(i, i)] += PSD_SHIFT;
        }
        return Ok(());
    }
    Err(Error::InvalidProblem(
        "objective matrix is not positive semidefinite within the repairable margin".into(),
    ))
}

/// Solver settings. Defaults follow the accuracy the orthogonality
/// diagnostics need; Monte Carlo callers loosen them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iterations: usize,
    /// Run the active-set polish after convergence.
    pub polish: bool,
    pub sigma: f64,
    /// Over-relaxation parameter in (0, 2).
    pub alpha: f64,
    /// Initial step-size parameter; adapted during the run unless
    /// `adaptive_rho` is off.
    pub rho: f64,
    pub adaptive_rho: bool,
    /// Residuals are evaluated every `check_interval` iterations.
    pub check_interval: usize,
    pub eps_infeasible: f64,
    pub ruiz_iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eps_abs: 1e-8,
            eps_rel: 1e-8,
            max_iterations: 200_000,
            polish: true,
            sigma: 1e-6,
            alpha: 1.6,
            rho: 0.1,
            adaptive_rho: true,
            check_interval: 25,
            eps_infeasible: 1e-7,
            ruiz_iterations: 10,
        }
    }
}

impl SolverConfig {
    /// Loosened settings for inner Gauss-Newton and bootstrap solves where
    /// only fitted values are consumed.
    pub fn fast() -> Self {
        Self { eps_abs: 1e-6, eps_rel: 1e-6, polish: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_abs > 0.0 && self.eps_rel >= 0.0) {
            return Err(Error::InvalidConfig("eps_abs must be positive, eps_rel nonnegative".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            return Err(Error::InvalidConfig("alpha must lie in (0, 2)".into()));
        }
        if self.rho <= 0.0 || self.sigma <= 0.0 {
            return Err(Error::InvalidConfig("rho and sigma must be positive".into()));
        }
        if self.check_interval == 0 || self.max_iterations == 0 {
            return Err(Error::InvalidConfig("iteration limits must be positive".into()));
        }
        Ok(())
    }
}

/// Primal/dual solution of a QP.
///
/// Dual sign convention: every inequality row (`l < u`) reports a nonnegative
/// multiplier at the optimum; which side of a two-sided range row is active
/// follows from the primal slacks. Equality rows report the signed multiplier
/// of the stationarity identity `Px + q + A'y = 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QpSolution {
    pub primal: Vec<f64>,
    pub duals: Vec<f64>,
    pub objective_value: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Total complementary-slackness residual; equals the duality gap at a
    /// stationary point.
    pub duality_gap: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub polished: bool,
    /// Set when a polish attempt hit a singular or inconsistent KKT system
    /// and the unpolished solution was kept.
    pub polish_failed: bool,
}

impl QpSolution {
    pub fn report(&self) -> SolverReport {
        SolverReport {
            status: self.status,
            iterations: self.iterations,
            primal_residual: self.primal_residual,
            dual_residual: self.dual_residual,
            duality_gap: self.duality_gap,
            objective_value: self.objective_value,
            polished: self.polished,
        }
    }

    /// Signed multipliers satisfying `Px + q + A'y = 0` at the optimum,
    /// reconstructed from the reported convention. Two-sided range rows pick
    /// their sign from whichever bound the primal sits closer to.
    pub fn signed_duals(&self, qp: &QuadraticProgram) -> Vec<f64> {
        self.duals
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                let l = qp.lower_bounds()[j];
                let u = qp.upper_bounds()[j];
                if l == u {
                    v
                } else if l.is_finite() && u == f64::INFINITY {
                    -v
                } else if u.is_finite() && l == f64::NEG_INFINITY {
                    v
                } else if l.is_finite() && u.is_finite() {
                    let ax = qp.constraint_matrix().row_dot(j, &self.primal);
                    if (ax - l).abs() <= (u - ax).abs() {
                        -v
                    } else {
                        v
                    }
                } else {
                    v
                }
            })
            .collect()
    }
}

/// Compact solve summary carried on fits and serialized into result files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverReport {
    pub status: SolveStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub duality_gap: f64,
    pub objective_value: f64,
    pub polished: bool,
}

/// Optional initial point for [`solve_from`].
#[derive(Debug, Clone, Default)]
pub struct StartPoint {
    pub primal: Vec<f64>,
    /// Signed duals (stationarity convention).
    pub duals: Vec<f64>,
}

/// Solve a QP from a cold start.
pub fn solve(qp: &QuadraticProgram, config: &SolverConfig) -> Result<QpSolution> {
    solve_from(qp, config, None)
}

/// Solve a QP from an optional initial point.
pub fn solve_from(
    qp: &QuadraticProgram,
    config: &SolverConfig,
    start: Option<&StartPoint>,
) -> Result<QpSolution> {
    config.validate()?;
    let mut solution = admm::run(qp, config, start);
    if config.polish
        && matches!(solution.status, SolveStatus::Optimal | SolveStatus::MaxIterations)
    {
        solution = polish::polish(qp, solution);
    }
    Ok(solution)
}

/// Re-solve the KKT system on the active set detected in `solution`.
///
/// Returns a refined solution with residuals around 1e-10 when the active set
/// was identified correctly; otherwise the input is returned unchanged with
/// `polish_failed` set.
pub fn polish(qp: &QuadraticProgram, solution: QpSolution) -> QpSolution {
    polish::polish(qp, solution)
}
