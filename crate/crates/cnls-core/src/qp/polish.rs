//! Active-set refinement of an ADMM solution.
//!
//! Re-solves the equality-constrained KKT system on the detected active set
//! with a tiny Tikhonov term (which breaks ties toward the minimum-norm
//! solution) and iterative refinement against the unregularized system. The
//! refined point is accepted only if it stays feasible for every constraint,
//! keeps valid dual signs, and does not worsen either residual; otherwise the
//! input solution is returned unchanged with `polish_failed` set.

use super::{QpSolution, QuadraticProgram, SolveStatus};
use nalgebra::{DMatrix, DVector};
use std::collections::HashSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Equality,
    Lower,
    Upper,
}

/// Compose the reported solution from a primal point and signed duals.
/// Residuals, complementarity, and the objective are always recomputed here
/// so that every path reports the same quantities.
pub(super) fn finalize(
    qp: &QuadraticProgram,
    x: Vec<f64>,
    y_signed: Vec<f64>,
    status: SolveStatus,
    iterations: usize,
    polished: bool,
    polish_failed: bool,
) -> QpSolution {
    let d = qp.num_variables();
    let m = qp.num_constraints();
    let l = qp.lower_bounds();
    let u = qp.upper_bounds();

    let mut ax = vec![0.0; m];
    qp.constraint_matrix().matvec(&x, &mut ax);

    let mut primal_residual = 0.0f64;
    let mut duality_gap = 0.0f64;
    for j in 0..m {
        let below = if l[j].is_finite() { l[j] - ax[j] } else { f64::NEG_INFINITY };
        let above = if u[j].is_finite() { ax[j] - u[j] } else { f64::NEG_INFINITY };
        primal_residual = primal_residual.max(below.max(above).max(0.0));
        let y = y_signed[j];
        if y > 0.0 {
            duality_gap += if u[j].is_finite() { (y * (u[j] - ax[j])).abs() } else { y * (1.0 + ax[j].abs()) };
        } else if y < 0.0 {
            duality_gap += if l[j].is_finite() { (y * (ax[j] - l[j])).abs() } else { -y * (1.0 + ax[j].abs()) };
        }
    }

    let mut stationarity = vec![0.0; d];
    qp.constraint_matrix().matvec_t(&y_signed, &mut stationarity);
    let p = qp.objective_matrix();
    let mut dual_residual = 0.0f64;
    for i in 0..d {
        let mut px = 0.0;
        for j in 0..d {
            px += p[(i, j)] * x[j];
        }
        dual_residual = dual_residual.max((px + qp.objective_vector()[i] + stationarity[i]).abs());
    }

    let duals: Vec<f64> = (0..m)
        .map(|j| if l[j] == u[j] { y_signed[j] } else { y_signed[j].abs() })
        .collect();

    QpSolution {
        objective_value: qp.objective_value(&x),
        primal: x,
        duals,
        primal_residual,
        dual_residual,
        duality_gap,
        status,
        iterations,
        polished,
        polish_failed,
    }
}

pub(super) fn polish(qp: &QuadraticProgram, solution: QpSolution) -> QpSolution {
    if !matches!(solution.status, SolveStatus::Optimal | SolveStatus::MaxIterations) {
        return solution;
    }
    match try_polish(qp, &solution) {
        Some(refined) => refined,
        None => QpSolution { polish_failed: true, ..solution },
    }
}

fn try_polish(qp: &QuadraticProgram, solution: &QpSolution) -> Option<QpSolution> {
    let d = qp.num_variables();
    let m = qp.num_constraints();
    let l = qp.lower_bounds();
    let u = qp.upper_bounds();
    let y_signed = solution.signed_duals(qp);

    let mut ax = vec![0.0; m];
    qp.constraint_matrix().matvec(&solution.primal, &mut ax);

    let y_max = y_signed.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let y_tol = 1e-9 * (1.0 + y_max);
    let slack_scale = 1e3 * solution.primal_residual.max(1e-12);

    let mut active: Vec<(usize, Side, f64)> = Vec::new();
    for j in 0..m {
        if qp.is_equality_row(j) {
            active.push((j, Side::Equality, l[j]));
            continue;
        }
        let slack_l = if l[j].is_finite() { ax[j] - l[j] } else { f64::INFINITY };
        let slack_u = if u[j].is_finite() { u[j] - ax[j] } else { f64::INFINITY };
        let thr_l = slack_scale.max(1e-9) * (1.0 + l[j].abs().min(1e12));
        let thr_u = slack_scale.max(1e-9) * (1.0 + u[j].abs().min(1e12));
        let lower_hit = slack_l <= thr_l || y_signed[j] < -y_tol;
        let upper_hit = slack_u <= thr_u || y_signed[j] > y_tol;
        match (lower_hit, upper_hit) {
            (true, true) => {
                // Ambiguous range row: take the nearer bound.
                if slack_l <= slack_u {
                    active.push((j, Side::Lower, l[j]));
                } else {
                    active.push((j, Side::Upper, u[j]));
                }
            }
            (true, false) => active.push((j, Side::Lower, l[j])),
            (false, true) => active.push((j, Side::Upper, u[j])),
            (false, false) => {}
        }
    }

    // Literal duplicate rows in the active set make the KKT system singular
    // by construction; bail out instead of splitting multipliers arbitrarily.
    let mut seen: HashSet<Vec<(usize, u64)>> = HashSet::new();
    for &(j, _, _) in &active {
        let key: Vec<(usize, u64)> = qp
            .constraint_matrix()
            .row(j)
            .iter()
            .map(|&(c, v)| (c, v.to_bits()))
            .collect();
        if !seen.insert(key) {
            return None;
        }
    }

    let na = active.len();
    let n = d + na;
    let p = qp.objective_matrix();
    let p_scale = (0..d).map(|i| p[(i, i)].abs()).fold(0.0f64, f64::max).max(1.0);
    let delta = 1e-9 * p_scale;

    let mut kkt = DMatrix::zeros(n, n);
    kkt.view_mut((0, 0), (d, d)).copy_from(p);
    for i in 0..d {
        kkt[(i, i)] += delta;
    }
    for (r, &(j, _, _)) in active.iter().enumerate() {
        for &(c, v) in qp.constraint_matrix().row(j) {
            kkt[(d + r, c)] = v;
            kkt[(c, d + r)] = v;
        }
        kkt[(d + r, d + r)] = -delta;
    }
    let lu = kkt.lu();

    let mut x = DVector::from_column_slice(&solution.primal);
    let mut nu = DVector::from_fn(na, |r, _| y_signed[active[r].0]);

    // Iterative refinement against the unregularized KKT system.
    let mut rhs = DVector::zeros(n);
    for _ in 0..4 {
        for i in 0..d {
            let mut acc = -qp.objective_vector()[i];
            for j in 0..d {
                acc -= p[(i, j)] * x[j];
            }
            rhs[i] = acc;
        }
        for (r, &(j, _, _)) in active.iter().enumerate() {
            for &(c, v) in qp.constraint_matrix().row(j) {
                rhs[c] -= v * nu[r];
            }
            rhs[d + r] = active[r].2 - qp.constraint_matrix().row_dot(j, x.as_slice());
        }
        let delta_sol = lu.solve(&rhs)?;
        if !delta_sol.iter().all(|v| v.is_finite()) {
            return None;
        }
        for i in 0..d {
            x[i] += delta_sol[i];
        }
        for r in 0..na {
            nu[r] += delta_sol[d + r];
        }
    }

    // Residual of the unregularized KKT system must be tiny, otherwise the
    // active set was wrong or the system is inconsistent.
    let mut kkt_res = 0.0f64;
    for i in 0..d {
        let mut acc = qp.objective_vector()[i];
        for j in 0..d {
            acc += p[(i, j)] * x[j];
        }
        for (r, &(j2, _, _)) in active.iter().enumerate() {
            for &(c, v) in qp.constraint_matrix().row(j2) {
                if c == i {
                    acc += v * nu[r];
                }
            }
        }
        kkt_res = kkt_res.max(acc.abs());
    }
    for &(j, _, b) in &active {
        kkt_res = kkt_res.max((qp.constraint_matrix().row_dot(j, x.as_slice()) - b).abs());
    }
    let scale = p_scale + qp.objective_vector().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if !kkt_res.is_finite() || kkt_res > 1e-8 * scale.max(1.0) {
        return None;
    }

    // Dual sign validation on inequality rows.
    let sign_tol = 1e-7 * (1.0 + nu.iter().fold(0.0f64, |a, v| a.max(v.abs())));
    for (r, &(_, side, _)) in active.iter().enumerate() {
        match side {
            Side::Lower if nu[r] > sign_tol => return None,
            Side::Upper if nu[r] < -sign_tol => return None,
            _ => {}
        }
    }

    let mut y_full = vec![0.0; m];
    for (r, &(j, _, _)) in active.iter().enumerate() {
        y_full[j] = nu[r];
    }
    let refined = finalize(
        qp,
        x.as_slice().to_vec(),
        y_full,
        SolveStatus::Optimal,
        solution.iterations,
        true,
        false,
    );

    let tiny = 1e-12;
    if refined.primal_residual <= solution.primal_residual.max(tiny)
        && refined.dual_residual <= solution.dual_residual.max(tiny)
    {
        Some(refined)
    } else {
        None
    }
}
