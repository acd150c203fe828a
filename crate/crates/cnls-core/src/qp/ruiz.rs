use super::{QuadraticProgram, RowMatrix};
use nalgebra::DMatrix;

/// Scaled problem data together with the diagonal scalings that produced it.
///
/// With variable scaling D, row scaling E and cost scaling c:
///   P' = c D P D,  q' = c D q,  A' = E A D,  l' = E l,  u' = E u
/// and the original quantities are recovered as
///   x = D x',  y = E y' / c.
pub(super) struct Scaled {
    pub p: DMatrix<f64>,
    pub q: Vec<f64>,
    pub a: RowMatrix,
    pub l: Vec<f64>,
    pub u: Vec<f64>,
    pub d: Vec<f64>,
    pub e: Vec<f64>,
    pub c: f64,
}

const SCALE_CLAMP_MIN: f64 = 1e-4;
const SCALE_CLAMP_MAX: f64 = 1e4;

fn inv_sqrt_clamped(norm: f64) -> f64 {
    if norm <= 0.0 || !norm.is_finite() {
        1.0
    } else {
        (1.0 / norm.sqrt()).clamp(SCALE_CLAMP_MIN, SCALE_CLAMP_MAX)
    }
}

/// Ruiz equilibration of the KKT block matrix [P A'; A 0] plus cost scaling.
pub(super) fn scale(qp: &QuadraticProgram, iterations: usize) -> Scaled {
    let d_vars = qp.num_variables();
    let m = qp.num_constraints();
    let mut p = qp.objective_matrix().clone();
    let mut q = qp.objective_vector().to_vec();
    let mut a = qp.constraint_matrix().clone();
    let mut l = qp.lower_bounds().to_vec();
    let mut u = qp.upper_bounds().to_vec();
    let mut d = vec![1.0; d_vars];
    let mut e = vec![1.0; m];
    let mut c = 1.0;

    let mut col_norms = vec![0.0f64; d_vars];
    for _ in 0..iterations {
        // Column norms over the stacked [P; A] block.
        col_norms.fill(0.0);
        for j in 0..d_vars {
            for i in 0..d_vars {
                col_norms[j] = col_norms[j].max(p[(i, j)].abs());
            }
        }
        a.col_inf_norms(&mut col_norms);
        let delta_d: Vec<f64> = col_norms.iter().map(|&n| inv_sqrt_clamped(n)).collect();
        let delta_e: Vec<f64> = (0..m).map(|j| inv_sqrt_clamped(a.row_inf_norm(j))).collect();

        for i in 0..d_vars {
            for j in 0..d_vars {
                p[(i, j)] *= delta_d[i] * delta_d[j];
            }
        }
        for (qi, dd) in q.iter_mut().zip(&delta_d) {
            *qi *= dd;
        }
        a.scale_cols(&delta_d);
        for j in 0..m {
            a.scale_row(j, delta_e[j]);
            l[j] *= delta_e[j];
            u[j] *= delta_e[j];
        }
        for (di, dd) in d.iter_mut().zip(&delta_d) {
            *di *= dd;
        }
        for (ei, de) in e.iter_mut().zip(&delta_e) {
            *ei *= de;
        }

        // Cost normalization.
        let mut p_col_mean = 0.0;
        for j in 0..d_vars {
            let mut n = 0.0f64;
            for i in 0..d_vars {
                n = n.max(p[(i, j)].abs());
            }
            p_col_mean += n;
        }
        if d_vars > 0 {
            p_col_mean /= d_vars as f64;
        }
        let q_norm = q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let denom = p_col_mean.max(q_norm);
        if denom > 0.0 && denom.is_finite() {
            let gamma = (1.0 / denom).clamp(SCALE_CLAMP_MIN, SCALE_CLAMP_MAX);
            if (gamma - 1.0).abs() > 1e-12 {
                p *= gamma;
                for qi in &mut q {
                    *qi *= gamma;
                }
                c *= gamma;
            }
        }
    }

    Scaled { p, q, a, l, u, d, e, c }
}
