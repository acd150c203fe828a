//! CNLS model construction and fitting.
//!
//! The additive estimator solves one quadratic program over per-observation
//! hyperplanes (intercepts alpha_i, slopes beta_i) tied together by Afriat
//! inequalities. The multiplicative estimator wraps the same QP in a damped
//! Gauss-Newton loop that relinearizes ln(yhat) at the incumbent fitted
//! values.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::qp::{self, QpSolution, QuadraticProgram, RowMatrix, SolveStatus, SolverConfig, SolverReport, StartPoint};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorForm {
    Additive,
    Multiplicative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Curvature {
    Concave,
    Convex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Monotonicity {
    None,
    Increasing,
    Decreasing,
}

/// Shape and error-structure choices for a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub error_form: ErrorForm,
    pub curvature: Curvature,
    pub monotone: Monotonicity,
    /// Forces all intercepts to zero (linear homogeneity).
    pub homogeneous: bool,
}

impl ModelSpec {
    pub fn additive() -> Self {
        Self {
            error_form: ErrorForm::Additive,
            curvature: Curvature::Concave,
            monotone: Monotonicity::None,
            homogeneous: false,
        }
    }

    pub fn multiplicative() -> Self {
        Self { error_form: ErrorForm::Multiplicative, ..Self::additive() }
    }

    pub fn with_monotone(mut self, m: Monotonicity) -> Self {
        self.monotone = m;
        self
    }

    pub fn with_curvature(mut self, c: Curvature) -> Self {
        self.curvature = c;
        self
    }

    pub fn with_homogeneous(mut self, h: bool) -> Self {
        self.homogeneous = h;
        self
    }
}

/// A fitted CNLS model: one supporting hyperplane per observation plus the
/// dual multipliers of every constraint block.
#[derive(Debug, Clone)]
pub struct CnlsFit {
    spec: ModelSpec,
    intercepts: Vec<f64>,
    slopes: DMatrix<f64>,
    residuals: Vec<f64>,
    fitted: Vec<f64>,
    duals_concavity: Vec<(usize, usize, f64)>,
    duals_monotonicity: Option<DMatrix<f64>>,
    duals_equation: Vec<f64>,
    solver_report: SolverReport,
    x_ranges: Vec<(f64, f64)>,
}

/// Envelope prediction at a new point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub value: f64,
    /// Set when the query point lies outside the columnwise training range.
    pub extrapolated: bool,
}

impl CnlsFit {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn n(&self) -> usize {
        self.fitted.len()
    }

    pub fn k(&self) -> usize {
        self.slopes.ncols()
    }

    pub fn intercepts(&self) -> &[f64] {
        &self.intercepts
    }

    pub fn slopes(&self) -> &DMatrix<f64> {
        &self.slopes
    }

    /// Residuals in level units (additive) or log units (multiplicative).
    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    /// Fitted values in level units for both error forms.
    pub fn fitted(&self) -> &[f64] {
        &self.fitted
    }

    /// Concavity multipliers as sparse (i, h, lambda) triplets.
    pub fn duals_concavity(&self) -> &[(usize, usize, f64)] {
        &self.duals_concavity
    }

    pub fn duals_monotonicity(&self) -> Option<&DMatrix<f64>> {
        self.duals_monotonicity.as_ref()
    }

    pub fn duals_equation(&self) -> &[f64] {
        &self.duals_equation
    }

    pub fn solver_report(&self) -> &SolverReport {
        &self.solver_report
    }

    pub fn x_ranges(&self) -> &[(f64, f64)] {
        &self.x_ranges
    }

    /// Envelope prediction: the minimum over fitted hyperplanes for concave
    /// fits, the maximum for convex fits. Level units in both error forms.
    pub fn predict(&self, x_new: &[f64]) -> Result<Prediction> {
        if x_new.len() != self.k() {
            return Err(Error::InvalidData(format!(
                "prediction point has {} coordinates, fit has {}",
                x_new.len(),
                self.k()
            )));
        }
        if x_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite prediction point".into()));
        }
        let mut value = match self.spec.curvature {
            Curvature::Concave => f64::INFINITY,
            Curvature::Convex => f64::NEG_INFINITY,
        };
        for i in 0..self.n() {
            let mut v = self.intercepts[i];
            for j in 0..self.k() {
                v += self.slopes[(i, j)] * x_new[j];
            }
            value = match self.spec.curvature {
                Curvature::Concave => value.min(v),
                Curvature::Convex => value.max(v),
            };
        }
        let extrapolated = x_new
            .iter()
            .zip(&self.x_ranges)
            .any(|(v, (lo, hi))| v < lo || v > hi);
        Ok(Prediction { value, extrapolated })
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        spec: ModelSpec,
        intercepts: Vec<f64>,
        slopes: DMatrix<f64>,
        residuals: Vec<f64>,
        fitted: Vec<f64>,
        duals_concavity: Vec<(usize, usize, f64)>,
        duals_monotonicity: Option<DMatrix<f64>>,
        duals_equation: Vec<f64>,
        solver_report: SolverReport,
        x_ranges: Vec<(f64, f64)>,
    ) -> Self {
        Self {
            spec,
            intercepts,
            slopes,
            residuals,
            fitted,
            duals_concavity,
            duals_monotonicity,
            duals_equation,
            solver_report,
            x_ranges,
        }
    }
}

/// Variable/row indexing for the CNLS QP.
///
/// Variables: `[alpha_1..alpha_n, beta_11..beta_nk, e_1..e_n, shared..]`,
/// with the alpha block omitted under homogeneity. Rows: Afriat pairs (i, h)
/// for i != h (tied regressor rows collapse the (i,h)/(h,i) pair into one
/// equality row), then monotonicity bounds, then the n regression-equation
/// equality rows.
#[derive(Debug, Clone)]
pub(crate) struct CnlsLayout {
    pub n: usize,
    pub k: usize,
    pub homogeneous: bool,
    pub n_shared: usize,
    pub monotone_rows: bool,
    /// (i, h, tied) per emitted Afriat row, in emission order.
    pub afriat_pairs: Vec<(usize, usize, bool)>,
}

impl CnlsLayout {
    fn n_alpha(&self) -> usize {
        if self.homogeneous {
            0
        } else {
            self.n
        }
    }

    pub fn alpha(&self, i: usize) -> Option<usize> {
        (!self.homogeneous).then_some(i)
    }

    pub fn beta(&self, i: usize, j: usize) -> usize {
        self.n_alpha() + i * self.k + j
    }

    pub fn e(&self, i: usize) -> usize {
        self.n_alpha() + self.n * self.k + i
    }

    pub fn shared(&self, t: usize) -> usize {
        self.n_alpha() + self.n * self.k + self.n + t
    }

    pub fn dim(&self) -> usize {
        self.n_alpha() + self.n * self.k + self.n + self.n_shared
    }

    pub fn mono_row(&self, i: usize, j: usize) -> usize {
        debug_assert!(self.monotone_rows);
        self.afriat_pairs.len() + i * self.k + j
    }

    pub fn eq_row(&self, i: usize) -> usize {
        self.afriat_pairs.len() + if self.monotone_rows { self.n * self.k } else { 0 } + i
    }
}

pub(crate) struct CnlsProblem {
    pub qp: QuadraticProgram,
    pub layout: CnlsLayout,
    /// Original shared-column values (unscaled by incumbent fitted values).
    shared_cols: Vec<Vec<f64>>,
}

/// Materialize the CNLS constraints as a QP.
///
/// `weights[i]` multiplies the i-th squared residual in the objective;
/// `targets[i]` is the right-hand side of the i-th equation row; `shared`
/// columns enter every equation row with a single shared coefficient
/// (the control-function term).
pub(crate) fn build_problem(
    data: &Dataset,
    spec: &ModelSpec,
    weights: Option<&[f64]>,
    targets: &[f64],
    shared: &[Vec<f64>],
) -> Result<CnlsProblem> {
    let n = data.n();
    let k = data.k();
    if targets.len() != n {
        return Err(Error::InvalidData("target vector length mismatch".into()));
    }
    if let Some(w) = weights {
        if w.len() != n || w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidData("observation weights must be positive and finite".into()));
        }
    }
    for col in shared {
        if col.len() != n {
            return Err(Error::InvalidData("shared column length mismatch".into()));
        }
    }

    // Exact-duplicate regressor rows: the two directed Afriat rows of a tied
    // pair are mirror inequalities, emitted once as an equality.
    let tied = |a: usize, b: usize| -> bool { (0..k).all(|j| data.x()[(a, j)] == data.x()[(b, j)]) };

    let mut layout = CnlsLayout {
        n,
        k,
        homogeneous: spec.homogeneous,
        n_shared: shared.len(),
        monotone_rows: spec.monotone != Monotonicity::None,
        afriat_pairs: Vec::with_capacity(n * n.saturating_sub(1)),
    };
    for i in 0..n {
        for h in 0..n {
            if i == h {
                continue;
            }
            if tied(i, h) {
                if i < h {
                    layout.afriat_pairs.push((i, h, true));
                }
            } else {
                layout.afriat_pairs.push((i, h, false));
            }
        }
    }

    let d = layout.dim();
    let mut a = RowMatrix::with_capacity(
        d,
        layout.afriat_pairs.len() + if layout.monotone_rows { n * k } else { 0 } + n,
    );
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    let mut entries: Vec<(usize, f64)> = Vec::with_capacity(2 * k + 4);

    for &(i, h, is_tied) in &layout.afriat_pairs {
        entries.clear();
        if let Some(ai) = layout.alpha(i) {
            entries.push((ai, 1.0));
        }
        if let Some(ah) = layout.alpha(h) {
            entries.push((ah, -1.0));
        }
        for j in 0..k {
            let xij = data.x()[(i, j)];
            if xij != 0.0 {
                entries.push((layout.beta(i, j), xij));
                entries.push((layout.beta(h, j), -xij));
            }
        }
        a.push_row(&entries);
        if is_tied {
            lower.push(0.0);
            upper.push(0.0);
        } else {
            match spec.curvature {
                Curvature::Concave => {
                    lower.push(f64::NEG_INFINITY);
                    upper.push(0.0);
                }
                Curvature::Convex => {
                    lower.push(0.0);
                    upper.push(f64::INFINITY);
                }
            }
        }
    }

    if layout.monotone_rows {
        for i in 0..n {
            for j in 0..k {
                a.push_row(&[(layout.beta(i, j), 1.0)]);
                match spec.monotone {
                    Monotonicity::Increasing => {
                        lower.push(0.0);
                        upper.push(f64::INFINITY);
                    }
                    Monotonicity::Decreasing => {
                        lower.push(f64::NEG_INFINITY);
                        upper.push(0.0);
                    }
                    Monotonicity::None => unreachable!(),
                }
            }
        }
    }

    for i in 0..n {
        entries.clear();
        if let Some(ai) = layout.alpha(i) {
            entries.push((ai, 1.0));
        }
        for j in 0..k {
            let xij = data.x()[(i, j)];
            if xij != 0.0 {
                entries.push((layout.beta(i, j), xij));
            }
        }
        entries.push((layout.e(i), 1.0));
        for (t, col) in shared.iter().enumerate() {
            if col[i] != 0.0 {
                entries.push((layout.shared(t), col[i]));
            }
        }
        a.push_row(&entries);
        lower.push(targets[i]);
        upper.push(targets[i]);
    }

    let mut p = DMatrix::zeros(d, d);
    for i in 0..n {
        p[(layout.e(i), layout.e(i))] = weights.map_or(1.0, |w| w[i]);
    }

    let mut names = Vec::with_capacity(d);
    if !spec.homogeneous {
        for i in 0..n {
            names.push(format!("alpha_{i}"));
        }
    }
    for i in 0..n {
        for j in 0..k {
            names.push(format!("beta_{i}_{j}"));
        }
    }
    for i in 0..n {
        names.push(format!("e_{i}"));
    }
    for t in 0..shared.len() {
        names.push(format!("shared_{t}"));
    }

    let qp = QuadraticProgram::new(p, vec![0.0; d], a, lower, upper, names)?;
    Ok(CnlsProblem { qp, layout, shared_cols: shared.to_vec() })
}

/// Public QP materialization of the CNLS problem (unit weights, targets y).
pub fn build_qp(data: &Dataset, spec: &ModelSpec) -> Result<QuadraticProgram> {
    Ok(build_problem(data, spec, None, data.y(), &[])?.qp)
}

impl CnlsProblem {
    /// Retarget equation rows and weights for a Gauss-Newton iteration.
    /// `shared_scale[i]` rescales each shared column entry in equation row i
    /// (used by the multiplicative control-function variant).
    pub fn retarget(&mut self, weights: &[f64], targets: &[f64], shared_scale: Option<&[f64]>) {
        let layout = self.layout.clone();
        for i in 0..layout.n {
            self.qp.set_diagonal(layout.e(i), weights[i]);
            let row = layout.eq_row(i);
            self.qp.set_row_bounds(row, targets[i], targets[i]);
            if let Some(scale) = shared_scale {
                for (t, col) in self.shared_cols.iter().enumerate() {
                    self.qp.set_row_entry(row, layout.shared(t), col[i] * scale[i]);
                }
            }
        }
    }

    pub fn solve(&self, config: &SolverConfig, start: Option<&StartPoint>) -> Result<QpSolution> {
        let solution = qp::solve_from(&self.qp, config, start)?;
        if solution.status != SolveStatus::Optimal {
            return Err(Error::SolverFailure {
                status: solution.status,
                primal_residual: solution.primal_residual,
                dual_residual: solution.dual_residual,
                iterations: solution.iterations,
                report: Box::new(solution.report()),
            });
        }
        Ok(solution)
    }

    pub fn fitted_from(&self, data: &Dataset, primal: &[f64]) -> Vec<f64> {
        let l = &self.layout;
        (0..l.n)
            .map(|i| {
                let mut v = l.alpha(i).map_or(0.0, |a| primal[a]);
                for j in 0..l.k {
                    v += primal[l.beta(i, j)] * data.x()[(i, j)];
                }
                v
            })
            .collect()
    }

    pub fn shared_coefficients(&self, primal: &[f64]) -> Vec<f64> {
        (0..self.layout.n_shared).map(|t| primal[self.layout.shared(t)]).collect()
    }
}

/// Pull hyperplanes and duals out of a solved CNLS QP.
///
/// Residuals are recomputed exactly from the data and fitted values rather
/// than read off the e-block, so the residual identity holds to the last bit.
/// With `canonical` set, the (non-unique) hyperplane coefficients are
/// replaced by the flattest supporting plane through each fitted point.
fn extract_fit(
    problem: &CnlsProblem,
    data: &Dataset,
    spec: &ModelSpec,
    solution: &QpSolution,
    canonical: bool,
) -> (CnlsFit, Vec<f64>) {
    let l = &problem.layout;
    let n = l.n;
    let k = l.k;
    let fitted = problem.fitted_from(data, &solution.primal);
    let mut intercepts: Vec<f64> =
        (0..n).map(|i| l.alpha(i).map_or(0.0, |a| solution.primal[a])).collect();
    let mut slopes = DMatrix::from_fn(n, k, |i, j| solution.primal[l.beta(i, j)]);
    if canonical {
        canonicalize_planes(data, spec, &fitted, &mut intercepts, &mut slopes);
    }

    let residuals: Vec<f64> = match spec.error_form {
        ErrorForm::Additive => data.y().iter().zip(&fitted).map(|(y, f)| y - f).collect(),
        ErrorForm::Multiplicative => {
            data.y().iter().zip(&fitted).map(|(y, f)| y.ln() - f.ln()).collect()
        }
    };

    let mut duals_concavity = Vec::new();
    for (row, &(i, h, tied)) in l.afriat_pairs.iter().enumerate() {
        let v = solution.duals[row];
        if tied {
            // Signed equality multiplier splits into the two directed pairs.
            let (fwd, bwd) = match spec.curvature {
                Curvature::Concave => (v.max(0.0), (-v).max(0.0)),
                Curvature::Convex => ((-v).max(0.0), v.max(0.0)),
            };
            if fwd > 0.0 {
                duals_concavity.push((i, h, fwd));
            }
            if bwd > 0.0 {
                duals_concavity.push((h, i, bwd));
            }
        } else if v != 0.0 {
            duals_concavity.push((i, h, v));
        }
    }

    let duals_monotonicity = l.monotone_rows.then(|| {
        DMatrix::from_fn(n, k, |i, j| solution.duals[l.mono_row(i, j)])
    });

    let duals_equation: Vec<f64> = (0..n)
        .map(|i| {
            let raw = -solution.duals[l.eq_row(i)];
            match spec.error_form {
                ErrorForm::Additive => raw,
                ErrorForm::Multiplicative => raw * fitted[i],
            }
        })
        .collect();

    let shared_coefs = problem.shared_coefficients(&solution.primal);
    let fit = CnlsFit::from_parts(
        *spec,
        intercepts,
        slopes,
        residuals,
        fitted,
        duals_concavity,
        duals_monotonicity,
        duals_equation,
        solution.report(),
        data.x_ranges(),
    );
    (fit, shared_coefs)
}

/// The flattest supporting hyperplane through each fitted point: minimize
/// ||beta_i||^2 subject to the plane lying on the correct side of every other
/// fitted point (and the fit's sign/homogeneity constraints). Fitted values,
/// residuals, and duals are untouched; this only removes the well-known
/// indeterminacy of CNLS hyperplane coefficients.
fn canonicalize_planes(
    data: &Dataset,
    spec: &ModelSpec,
    fitted: &[f64],
    intercepts: &mut [f64],
    slopes: &mut DMatrix<f64>,
) {
    let n = data.n();
    let k = data.k();
    let eps = 1e-9 * (1.0 + fitted.iter().fold(0.0f64, |a, &v| a.max(v.abs())));
    let concave = spec.curvature == Curvature::Concave;

    if k == 1 && !spec.homogeneous {
        for i in 0..n {
            let xi = data.x()[(i, 0)];
            let mut lo = f64::NEG_INFINITY;
            let mut hi = f64::INFINITY;
            for h in 0..n {
                let dx = data.x()[(h, 0)] - xi;
                if dx == 0.0 {
                    continue;
                }
                // concave: beta*dx >= dyhat - eps; convex: beta*dx <= dyhat + eps
                let bound = if concave {
                    (fitted[h] - fitted[i] - eps) / dx
                } else {
                    (fitted[h] - fitted[i] + eps) / dx
                };
                let lower_side = (dx > 0.0) == concave;
                if lower_side {
                    lo = lo.max(bound);
                } else {
                    hi = hi.min(bound);
                }
            }
            match spec.monotone {
                Monotonicity::Increasing => lo = lo.max(0.0),
                Monotonicity::Decreasing => hi = hi.min(0.0),
                Monotonicity::None => {}
            }
            let beta = if lo > hi { 0.5 * (lo + hi) } else { 0.0f64.clamp(lo, hi) };
            slopes[(i, 0)] = beta;
            intercepts[i] = fitted[i] - beta * xi;
        }
        return;
    }

    let cfg = SolverConfig { polish: true, ..SolverConfig::default() };
    for i in 0..n {
        let xi = data.x_row(i);
        let mut a = RowMatrix::new(k);
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        for h in 0..n {
            if h == i {
                continue;
            }
            let entries: Vec<(usize, f64)> =
                (0..k).map(|j| (j, data.x()[(h, j)] - xi[j])).filter(|&(_, v)| v != 0.0).collect();
            if entries.is_empty() {
                continue;
            }
            let gap = fitted[h] - fitted[i];
            if concave {
                lower.push(gap - eps);
                upper.push(f64::INFINITY);
            } else {
                lower.push(f64::NEG_INFINITY);
                upper.push(gap + eps);
            }
            a.push_row(&entries);
        }
        match spec.monotone {
            Monotonicity::None => {}
            sign => {
                for j in 0..k {
                    a.push_row(&[(j, 1.0)]);
                    if sign == Monotonicity::Increasing {
                        lower.push(0.0);
                        upper.push(f64::INFINITY);
                    } else {
                        lower.push(f64::NEG_INFINITY);
                        upper.push(0.0);
                    }
                }
            }
        }
        if spec.homogeneous {
            let entries: Vec<(usize, f64)> =
                (0..k).map(|j| (j, xi[j])).filter(|&(_, v)| v != 0.0).collect();
            a.push_row(&entries);
            lower.push(fitted[i]);
            upper.push(fitted[i]);
        }
        let mini = QuadraticProgram::new(
            DMatrix::identity(k, k),
            vec![0.0; k],
            a,
            lower,
            upper,
            (0..k).map(|j| format!("beta_{j}")).collect(),
        );
        let solved = mini.and_then(|qp| qp::solve(&qp, &cfg));
        if let Ok(sol) = solved {
            if sol.status == SolveStatus::Optimal {
                for j in 0..k {
                    slopes[(i, j)] = sol.primal[j];
                }
                intercepts[i] = if spec.homogeneous {
                    0.0
                } else {
                    fitted[i] - (0..k).map(|j| slopes[(i, j)] * xi[j]).sum::<f64>()
                };
            }
        }
    }
}

/// Additive CNLS fit.
pub fn fit_additive(data: &Dataset, spec: &ModelSpec, solver: &SolverConfig) -> Result<CnlsFit> {
    Ok(fit_additive_parts(data, spec, None, &[], solver, true)?.0)
}

/// Additive fit with observation weights and shared (control) columns.
pub(crate) fn fit_additive_parts(
    data: &Dataset,
    spec: &ModelSpec,
    weights: Option<&[f64]>,
    shared: &[Vec<f64>],
    solver: &SolverConfig,
    canonical: bool,
) -> Result<(CnlsFit, Vec<f64>)> {
    if spec.error_form != ErrorForm::Additive {
        return Err(Error::InvalidConfig("fit_additive requires an additive ModelSpec".into()));
    }
    let problem = build_problem(data, spec, weights, data.y(), shared)?;
    let solution = problem.solve(solver, None)?;
    Ok(extract_fit(&problem, data, spec, &solution, canonical))
}

/// Multiplicative CNLS fit via damped Gauss-Newton over weighted additive QPs.
pub fn fit_multiplicative(
    data: &Dataset,
    spec: &ModelSpec,
    solver: &SolverConfig,
) -> Result<CnlsFit> {
    Ok(fit_multiplicative_parts(data, spec, None, &[], solver, true)?.0)
}

const GN_MAX_OUTER: usize = 100;
const GN_REL_TOL: f64 = 1e-8;
const GN_MAX_HALVINGS: usize = 30;

pub(crate) fn fit_multiplicative_parts(
    data: &Dataset,
    spec: &ModelSpec,
    weights: Option<&[f64]>,
    shared: &[Vec<f64>],
    solver: &SolverConfig,
    canonical: bool,
) -> Result<(CnlsFit, Vec<f64>)> {
    if spec.error_form != ErrorForm::Multiplicative {
        return Err(Error::InvalidConfig(
            "fit_multiplicative requires a multiplicative ModelSpec".into(),
        ));
    }
    if let Some(i) = data.first_nonpositive_y() {
        return Err(Error::InvalidData(format!(
            "multiplicative model requires positive outputs; column '{}' is {} at row '{}'",
            data.y_name(),
            data.y()[i],
            data.row_ids()[i]
        )));
    }
    let n = data.n();
    let floor = 1e-6 * median(data.y());

    // Linearize around the sample mean first; every later iteration
    // linearizes around the incumbent fitted values.
    let y_mean = data.y().iter().sum::<f64>() / n as f64;
    let mut incumbent: Vec<f64> = vec![y_mean; n];

    let mut inner_cfg = solver.clone();
    inner_cfg.polish = false;
    inner_cfg.eps_abs = solver.eps_abs.max(1e-8);
    inner_cfg.eps_rel = solver.eps_rel.max(1e-8);

    let gn_targets = |inc: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let w: Vec<f64> = inc
            .iter()
            .enumerate()
            .map(|(i, &f)| weights.map_or(1.0, |ww| ww[i]) / (f * f))
            .collect();
        let c: Vec<f64> =
            inc.iter().zip(data.y()).map(|(&f, &y)| f * (1.0 + (y / f).ln())).collect();
        (w, c)
    };

    let (w0, c0) = gn_targets(&incumbent);
    let mut problem = build_problem(data, spec, Some(&w0), &c0, shared)?;
    let mut start: Option<StartPoint> = None;
    let mut prev_rel_change = f64::INFINITY;

    for outer in 0..GN_MAX_OUTER {
        let solution = problem.solve(&inner_cfg, start.as_ref())?;
        let candidate = problem.fitted_from(data, &solution.primal);

        // Damp toward the incumbent until the positivity floor holds.
        let mut step = 1.0;
        let mut halvings = 0;
        let next = loop {
            let blended: Vec<f64> = incumbent
                .iter()
                .zip(&candidate)
                .map(|(&a, &b)| a + step * (b - a))
                .collect();
            if blended.iter().all(|&v| v >= floor) {
                break blended;
            }
            halvings += 1;
            if halvings > GN_MAX_HALVINGS {
                return Err(Error::PositivityFloor(outer));
            }
            step *= 0.5;
        };

        let rel_change = incumbent
            .iter()
            .zip(&next)
            .map(|(&a, &b)| (b - a).abs() / a.abs().max(floor))
            .fold(0.0f64, f64::max);
        incumbent = next;
        start = Some(StartPoint {
            primal: solution.primal.clone(),
            duals: solution.signed_duals(&problem.qp),
        });

        // Converged, or stalled at the solver noise floor.
        let stalled = outer >= 3 && rel_change <= 1e-7 && rel_change >= 0.5 * prev_rel_change;
        prev_rel_change = rel_change;
        if rel_change <= GN_REL_TOL || stalled {
            break;
        }
        let (w, c) = gn_targets(&incumbent);
        let scale = shared_scale(shared, &incumbent);
        problem.retarget(&w, &c, scale.as_deref());
    }

    // Final full-accuracy solve at the converged linearization point.
    let (w, c) = gn_targets(&incumbent);
    let scale = shared_scale(shared, &incumbent);
    problem.retarget(&w, &c, scale.as_deref());
    let solution = problem.solve(solver, start.as_ref())?;
    let (fit, shared_coefs) = extract_fit(&problem, data, spec, &solution, canonical);
    if fit.fitted().iter().any(|&f| f < floor) {
        return Err(Error::PositivityFloor(GN_MAX_OUTER));
    }
    Ok((fit, shared_coefs))
}

/// Multiplicative CF variant scales each shared column by the incumbent
/// fitted value (the lambda*zeta term sits inside the log-model equation).
fn shared_scale(shared: &[Vec<f64>], incumbent: &[f64]) -> Option<Vec<f64>> {
    (!shared.is_empty()).then(|| incumbent.to_vec())
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solver() -> SolverConfig {
        SolverConfig::default()
    }

    fn dataset(y: &[f64], x: &[f64]) -> Dataset {
        Dataset::new(y.to_vec(), DMatrix::from_column_slice(y.len(), 1, x)).unwrap()
    }

    #[test]
    fn two_point_interpolation() {
        let data = dataset(&[1.0, 2.0], &[1.0, 2.0]);
        let spec = ModelSpec::additive().with_monotone(Monotonicity::Increasing);
        let fit = fit_additive(&data, &spec, &solver()).unwrap();
        for (r, f, want) in [(fit.residuals()[0], fit.fitted()[0], 1.0), (fit.residuals()[1], fit.fitted()[1], 2.0)] {
            assert!(r.abs() < 1e-7, "residual {r}");
            assert!((f - want).abs() < 1e-7, "fitted {f} want {want}");
        }
        let p = fit.predict(&[1.5]).unwrap();
        assert!((p.value - 1.5).abs() < 1e-7);
        assert!(!p.extrapolated);
        assert!(fit.predict(&[2.5]).unwrap().extrapolated);
    }

    #[test]
    fn constant_data_interpolates_constant() {
        let data = dataset(&[3.0, 3.0, 3.0, 3.0], &[1.0, 2.0, 4.0, 7.0]);
        let fit = fit_additive(&data, &ModelSpec::additive(), &solver()).unwrap();
        for i in 0..4 {
            assert!((fit.fitted()[i] - 3.0).abs() < 1e-7, "fitted {}", fit.fitted()[i]);
            assert!(fit.residuals()[i].abs() < 1e-7);
            assert!(fit.slopes()[(i, 0)].abs() < 1e-6, "slope {}", fit.slopes()[(i, 0)]);
        }
        assert!((fit.predict(&[3.0]).unwrap().value - 3.0).abs() < 1e-6);
    }

    #[test]
    fn build_qp_dimensions_match_layout() {
        let data = dataset(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]);
        let qp = build_qp(&data, &ModelSpec::additive()).unwrap();
        assert_eq!(qp.num_variables(), 9); // 3 alpha + 3 beta + 3 e
        assert_eq!(qp.num_constraints(), 9); // 6 Afriat + 3 equation

        let x2 = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 1.0, 3.0, 3.0]);
        let data2 = Dataset::new(vec![1.0, 2.0, 3.0], x2).unwrap();
        let spec2 = ModelSpec::additive().with_monotone(Monotonicity::Increasing);
        let qp2 = build_qp(&data2, &spec2).unwrap();
        assert_eq!(qp2.num_variables(), 12); // 3 + 6 + 3
        assert_eq!(qp2.num_constraints(), 6 + 6 + 3);

        let spec3 = ModelSpec::additive().with_homogeneous(true);
        let qp3 = build_qp(&data, &spec3).unwrap();
        assert_eq!(qp3.num_variables(), 6); // no alpha block
        assert_eq!(qp3.num_constraints(), 9);
    }

    #[test]
    fn duplicate_rows_collapse_to_equality() {
        let data = dataset(&[1.0, 1.5, 3.0], &[2.0, 2.0, 5.0]);
        let qp = build_qp(&data, &ModelSpec::additive()).unwrap();
        // pairs: (0,1) tied -> 1 row, (0,2), (2,0), (1,2), (2,1) -> 5 Afriat rows
        assert_eq!(qp.num_constraints(), 5 + 3);
        let fit = fit_additive(&data, &ModelSpec::additive(), &solver()).unwrap();
        assert!((fit.fitted()[0] - fit.fitted()[1]).abs() < 1e-8);
    }

    #[test]
    fn cobb_douglas_exact_multiplicative() {
        let x: Vec<f64> = vec![1.0, 2.0, 4.0, 6.0, 9.0, 12.0];
        let y: Vec<f64> = x.iter().map(|v| v.sqrt()).collect();
        let data = dataset(&y, &x);
        let spec = ModelSpec::multiplicative().with_monotone(Monotonicity::Increasing);
        let fit = fit_multiplicative(&data, &spec, &solver()).unwrap();
        for r in fit.residuals() {
            assert!(r.abs() < 1e-6, "log residual {r}");
        }
    }

    #[test]
    fn single_observation_multiplicative() {
        let data = dataset(&[2.5], &[3.0]);
        let fit = fit_multiplicative(&data, &ModelSpec::multiplicative(), &solver()).unwrap();
        assert!(fit.residuals()[0].abs() < 1e-9);
        assert!((fit.fitted()[0] - 2.5).abs() < 1e-8);
    }

    #[test]
    fn multiplicative_rejects_nonpositive_y() {
        let data = dataset(&[1.0, 0.0, 2.0], &[1.0, 2.0, 3.0]);
        let err = fit_multiplicative(&data, &ModelSpec::multiplicative(), &solver()).unwrap_err();
        assert!(err.to_string().contains("row '1'"), "{err}");
    }

    #[test]
    fn additive_residuals_sum_to_zero() {
        let y = [2.0, 3.5, 4.1, 4.4, 5.0, 4.9];
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let data = dataset(&y, &x);
        let fit = fit_additive(&data, &ModelSpec::additive(), &solver()).unwrap();
        let sum: f64 = fit.residuals().iter().sum();
        assert!(sum.abs() < 1e-7, "residual sum {sum}");
        // Afriat feasibility of the extracted hyperplanes.
        for i in 0..6 {
            for h in 0..6 {
                let own = fit.intercepts()[i] + fit.slopes()[(i, 0)] * x[i];
                let other = fit.intercepts()[h] + fit.slopes()[(h, 0)] * x[i];
                assert!(own <= other + 1e-6, "Afriat violated at ({i},{h})");
            }
        }
    }

    #[test]
    fn decreasing_monotonicity_bounds_slopes() {
        let y = [5.0, 4.0, 3.5, 2.0];
        let x = [1.0, 2.0, 3.0, 4.0];
        let data = dataset(&y, &x);
        let spec = ModelSpec::additive().with_monotone(Monotonicity::Decreasing);
        let fit = fit_additive(&data, &spec, &solver()).unwrap();
        for i in 0..4 {
            assert!(fit.slopes()[(i, 0)] <= 1e-9);
        }
    }

    #[test]
    fn homogeneous_fit_has_zero_intercepts_and_scales() {
        let y = [1.1, 2.3, 2.9, 4.2, 5.1];
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let data = dataset(&y, &x);
        let spec = ModelSpec::additive().with_homogeneous(true);
        let fit = fit_additive(&data, &spec, &solver()).unwrap();
        assert!(fit.intercepts().iter().all(|&a| a == 0.0));
        let p1 = fit.predict(&[2.0]).unwrap().value;
        let p2 = fit.predict(&[4.0]).unwrap().value;
        assert!((p2 - 2.0 * p1).abs() <= 1e-9 * p2.abs().max(1.0), "homogeneity {p1} {p2}");
    }

    #[test]
    fn equation_duals_match_residuals() {
        let y = [2.0, 3.1, 3.9, 4.2];
        let x = [1.0, 2.0, 3.0, 4.0];
        let data = dataset(&y, &x);
        let fit = fit_additive(&data, &ModelSpec::additive(), &solver()).unwrap();
        for (mu, e) in fit.duals_equation().iter().zip(fit.residuals()) {
            assert!((mu - e).abs() < 1e-6, "mu {mu} vs e {e}");
        }
    }
}
