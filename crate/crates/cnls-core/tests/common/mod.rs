//! Shared helpers for the integration suites: an active-set enumeration
//! oracle for small QPs and seeded instance generators.
//!
//! The oracle is deliberately independent of the solver: it enumerates active
//! sets exhaustively, solves each equality-constrained least-squares system
//! through an SVD, and keeps the best primal-feasible candidate.

#![allow(dead_code)]

use cnls_core::qp::{QuadraticProgram, RowMatrix};
use cnls_core::Dataset;
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Univariate dataset with additive noise around a concave increasing truth.
pub fn seeded_additive_univariate(seed: u64, n: usize) -> Dataset {
    let mut r = rng(seed);
    let mut x: Vec<f64> = (0..n).map(|_| r.random_range(1.0..10.0)).collect();
    x.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let y: Vec<f64> = x
        .iter()
        .map(|&v| {
            let noise: f64 = r.sample(StandardNormal);
            2.0 + 3.0 * (1.0 + v).ln() + 0.3 * noise
        })
        .collect();
    Dataset::new(y, DMatrix::from_column_slice(n, 1, &x)).unwrap()
}

/// Univariate positive dataset with multiplicative log-normal noise.
pub fn seeded_multiplicative_univariate(seed: u64, n: usize) -> Dataset {
    let mut r = rng(seed);
    let mut x: Vec<f64> = (0..n).map(|_| r.random_range(1.0..10.0)).collect();
    x.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let y: Vec<f64> = x
        .iter()
        .map(|&v| {
            let noise: f64 = r.sample(StandardNormal);
            (1.0 + v).powf(0.6) * (0.2 * noise).exp()
        })
        .collect();
    Dataset::new(y, DMatrix::from_column_slice(n, 1, &x)).unwrap()
}

/// Multivariate dataset: concave increasing truth plus noise. Additive form
/// uses a sum of square roots; multiplicative form a Cobb-Douglas, so the
/// outputs stay positive.
pub fn random_instance(
    r: &mut ChaCha8Rng,
    n: usize,
    k: usize,
    noise: f64,
    multiplicative: bool,
) -> Dataset {
    let x: DMatrix<f64> = DMatrix::from_fn(n, k, |_, _| r.random_range(1.0..10.0));
    let exponents: Vec<f64> = (0..k).map(|_| r.random_range(0.2..0.8) / k as f64).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let eps: f64 = r.sample(StandardNormal);
            if multiplicative {
                let f: f64 =
                    (0..k).map(|j| x[(i, j)].powf(exponents[j])).product::<f64>() * 3.0;
                f * (noise * eps).exp()
            } else {
                let f: f64 = 1.0 + (0..k).map(|j| (1.0 + x[(i, j)]).sqrt()).sum::<f64>();
                f + noise * eps
            }
        })
        .collect();
    Dataset::new(y, x).unwrap()
}

/// Optimal objective of a small QP by exhaustive active-set enumeration.
///
/// Every non-equality row contributes its finite sides as candidate active
/// constraints; all 2^c subsets are tried. Returns the smallest objective
/// among primal-feasible KKT-consistent candidates.
pub fn enumeration_oracle(qp: &QuadraticProgram, feas_tol: f64) -> Option<f64> {
    let d = qp.num_variables();
    let m = qp.num_constraints();
    let l = qp.lower_bounds();
    let u = qp.upper_bounds();

    // (row, bound value) candidates; equality rows are always active.
    let mut fixed: Vec<(usize, f64)> = Vec::new();
    let mut optional: Vec<(usize, f64)> = Vec::new();
    for j in 0..m {
        if qp.is_equality_row(j) {
            fixed.push((j, l[j]));
        } else {
            if l[j].is_finite() {
                optional.push((j, l[j]));
            }
            if u[j].is_finite() {
                optional.push((j, u[j]));
            }
        }
    }
    assert!(optional.len() <= 22, "oracle explosion: {} optional sides", optional.len());

    let mut best: Option<f64> = None;
    for mask in 0u64..(1u64 << optional.len()) {
        let mut active = fixed.clone();
        for (b, cand) in optional.iter().enumerate() {
            if mask & (1 << b) != 0 {
                active.push(*cand);
            }
        }
        if let Some(x) = solve_eqp(qp, &active) {
            if primal_feasible(qp, &x, feas_tol) {
                let obj = qp.objective_value(&x);
                best = Some(match best {
                    Some(b) if b <= obj => b,
                    _ => obj,
                });
            }
        }
    }
    best
}

/// Minimum-norm solution of the equality-constrained KKT system, or None if
/// the system is inconsistent (the active set admits no stationary point).
fn solve_eqp(qp: &QuadraticProgram, active: &[(usize, f64)]) -> Option<Vec<f64>> {
    solve_eqp_with_duals(qp, active).map(|(x, _)| x)
}

fn solve_eqp_with_duals(
    qp: &QuadraticProgram,
    active: &[(usize, f64)],
) -> Option<(Vec<f64>, Vec<f64>)> {
    let d = qp.num_variables();
    let n = d + active.len();
    let mut kkt = DMatrix::zeros(n, n);
    kkt.view_mut((0, 0), (d, d)).copy_from(qp.objective_matrix());
    for (r, &(j, _)) in active.iter().enumerate() {
        for &(c, v) in qp.constraint_matrix().row(j) {
            kkt[(d + r, c)] = v;
            kkt[(c, d + r)] = v;
        }
    }
    let mut rhs = DVector::zeros(n);
    for i in 0..d {
        rhs[i] = -qp.objective_vector()[i];
    }
    for (r, &(_, b)) in active.iter().enumerate() {
        rhs[d + r] = b;
    }
    let svd = kkt.clone().svd(true, true);
    let sol = svd.solve(&rhs, 1e-11).ok()?;
    let res = (&kkt * &sol) - &rhs;
    let scale = rhs.amax().max(1.0);
    if res.amax() > 1e-7 * scale {
        return None; // inconsistent: no stationary point on this active set
    }
    Some((sol.as_slice()[..d].to_vec(), sol.as_slice()[d..].to_vec()))
}

/// Exhaustive oracle with a KKT certificate and increasing-cardinality
/// search: the first candidate that is primal feasible with correctly signed
/// multipliers is the global optimum of the convex QP. Handles larger row
/// counts than [`enumeration_oracle`] because it stops as soon as the
/// optimum's active set size is reached.
pub fn certified_enumeration_oracle(qp: &QuadraticProgram, feas_tol: f64) -> Option<f64> {
    let m = qp.num_constraints();
    let l = qp.lower_bounds();
    let u = qp.upper_bounds();
    let mut fixed: Vec<(usize, f64)> = Vec::new();
    // (row, bound, is_lower_side)
    let mut optional: Vec<(usize, f64, bool)> = Vec::new();
    for j in 0..m {
        if qp.is_equality_row(j) {
            fixed.push((j, l[j]));
        } else {
            if l[j].is_finite() {
                optional.push((j, l[j], true));
            }
            if u[j].is_finite() {
                optional.push((j, u[j], false));
            }
        }
    }
    let nopt = optional.len();
    let max_size = nopt.min(qp.num_variables() + 2);
    for size in 0..=max_size {
        let mut combo: Vec<usize> = (0..size).collect();
        loop {
            let mut active = fixed.clone();
            for &b in &combo {
                active.push((optional[b].0, optional[b].1));
            }
            if let Some((x, nu)) = solve_eqp_with_duals(qp, &active) {
                if primal_feasible(qp, &x, feas_tol) {
                    let nu_scale = 1.0 + nu.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                    let signs_ok = combo.iter().enumerate().all(|(r, &b)| {
                        let mult = nu[fixed.len() + r];
                        if optional[b].2 {
                            mult <= 1e-8 * nu_scale
                        } else {
                            mult >= -1e-8 * nu_scale
                        }
                    });
                    if signs_ok {
                        return Some(qp.objective_value(&x));
                    }
                }
            }
            if !next_combination(&mut combo, nopt) {
                break;
            }
        }
    }
    None
}

/// Lexicographic successor of a k-combination drawn from 0..n.
fn next_combination(combo: &mut [usize], n: usize) -> bool {
    let k = combo.len();
    if k == 0 {
        return false;
    }
    let mut i = k;
    while i > 0 {
        i -= 1;
        if combo[i] < n - k + i {
            combo[i] += 1;
            for j in (i + 1)..k {
                combo[j] = combo[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

pub fn primal_feasible(qp: &QuadraticProgram, x: &[f64], tol: f64) -> bool {
    let l = qp.lower_bounds();
    let u = qp.upper_bounds();
    (0..qp.num_constraints()).all(|j| {
        let ax = qp.constraint_matrix().row_dot(j, x);
        let lo_ok = !l[j].is_finite() || ax >= l[j] - tol * (1.0 + l[j].abs());
        let hi_ok = !u[j].is_finite() || ax <= u[j] + tol * (1.0 + u[j].abs());
        lo_ok && hi_ok
    })
}

/// Random bounded-feasible QP with d variables and m one-sided/equality rows.
pub fn random_qp(rng: &mut ChaCha8Rng, d: usize, m: usize) -> QuadraticProgram {
    // PSD objective via M'M with a small diagonal, occasionally left singular
    // but then boxed so the problem stays bounded. Singular instances stay
    // small: each box row adds two candidate sides to the enumeration oracle.
    let strictly_convex = !(d <= 3 && m <= 4) || rng.random_bool(0.5);
    let mm = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let mut p = &mm * mm.transpose();
    if strictly_convex {
        for i in 0..d {
            p[(i, i)] += 0.1;
        }
    } else {
        // Zero out a row/column block to force semidefiniteness.
        let cut = rng.random_range(0..d);
        for i in 0..d {
            p[(i, cut)] = 0.0;
            p[(cut, i)] = 0.0;
        }
    }
    let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();

    let x0: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut a = RowMatrix::new(d);
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    for _ in 0..m {
        let nnz = rng.random_range(1..=d.min(3));
        let mut cols: Vec<usize> = (0..d).collect();
        cols.shuffle(rng);
        let entries: Vec<(usize, f64)> =
            cols[..nnz].iter().map(|&c| (c, rng.random_range(-2.0..2.0))).collect();
        let ax0: f64 = entries.iter().map(|&(c, v)| v * x0[c]).sum();
        match rng.random_range(0..3) {
            0 => {
                lower.push(ax0 - rng.random_range(0.0..1.0));
                upper.push(f64::INFINITY);
            }
            1 => {
                lower.push(f64::NEG_INFINITY);
                upper.push(ax0 + rng.random_range(0.0..1.0));
            }
            _ => {
                lower.push(ax0);
                upper.push(ax0);
            }
        }
        a.push_row(&entries);
    }
    if !strictly_convex {
        // Box every variable so a singular objective cannot make the problem
        // unbounded.
        for i in 0..d {
            a.push_row(&[(i, 1.0)]);
            lower.push(x0[i] - 3.0);
            upper.push(x0[i] + 3.0);
        }
    }
    let names = (0..d).map(|i| format!("v{i}")).collect();
    QuadraticProgram::new(p, q, a, lower, upper, names).unwrap()
}
