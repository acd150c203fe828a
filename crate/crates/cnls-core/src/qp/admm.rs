//! Operator-splitting iteration for box-constrained QPs.

use super::ruiz::{self, Scaled};
use super::{QpSolution, QuadraticProgram, SolveStatus, SolverConfig, StartPoint};
use nalgebra::{Cholesky, DVector, Dyn};

const RHO_EQ_FACTOR: f64 = 1e3;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_UPDATE_RATIO: f64 = 5.0;

struct Workspace {
    x: Vec<f64>,
    z: Vec<f64>,
    y: Vec<f64>,
    x_tilde: DVector<f64>,
    ax: Vec<f64>,
    v: Vec<f64>,
    tmp_d: Vec<f64>,
    tmp_m: Vec<f64>,
}

/// Factor K = P + sigma I + A' R A where R = diag(rho per row).
fn factor(
    scaled: &Scaled,
    sigma: f64,
    rho_rows: &[f64],
) -> Cholesky<f64, Dyn> {
    let d = scaled.q.len();
    let mut k = scaled.p.clone();
    for i in 0..d {
        k[(i, i)] += sigma;
    }
    for (j, &rho) in rho_rows.iter().enumerate() {
        let row = scaled.a.row(j);
        for &(c1, v1) in row {
            for &(c2, v2) in row {
                k[(c1, c2)] += rho * v1 * v2;
            }
        }
    }
    let mut bump = 0.0;
    loop {
        let attempt = if bump > 0.0 {
            let mut kb = k.clone();
            for i in 0..d {
                kb[(i, i)] += bump;
            }
            Cholesky::new(kb)
        } else {
            Cholesky::new(k.clone())
        };
        match attempt {
            Some(f) => return f,
            None => {
                // K is PD in exact arithmetic; recover from rounding.
                bump = if bump == 0.0 { 1e-10 } else { bump * 100.0 };
                assert!(bump < 1.0, "KKT factorization failed beyond recoverable regularization");
            }
        }
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub(super) struct RawSolution {
    pub x: Vec<f64>,
    pub y_signed: Vec<f64>,
    pub status: SolveStatus,
    pub iterations: usize,
}

pub(super) fn run(
    qp: &QuadraticProgram,
    config: &SolverConfig,
    start: Option<&StartPoint>,
) -> QpSolution {
    let raw = run_raw(qp, config, start);
    super::polish::finalize(qp, raw.x, raw.y_signed, raw.status, raw.iterations, false, false)
}

pub(super) fn run_raw(
    qp: &QuadraticProgram,
    config: &SolverConfig,
    start: Option<&StartPoint>,
) -> RawSolution {
    let d = qp.num_variables();
    let m = qp.num_constraints();
    let scaled = ruiz::scale(qp, config.ruiz_iterations);

    let mut rho_base = config.rho;
    let is_eq: Vec<bool> = (0..m).map(|j| qp.is_equality_row(j)).collect();
    let rho_rows = |base: f64| -> Vec<f64> {
        is_eq
            .iter()
            .map(|&eq| if eq { (base * RHO_EQ_FACTOR).clamp(RHO_MIN, RHO_MAX * RHO_EQ_FACTOR) } else { base })
            .collect()
    };
    let mut rho: Vec<f64> = rho_rows(rho_base);
    let mut chol = factor(&scaled, config.sigma, &rho);

    let mut ws = Workspace {
        x: vec![0.0; d],
        z: vec![0.0; m],
        y: vec![0.0; m],
        x_tilde: DVector::zeros(d),
        ax: vec![0.0; m],
        v: vec![0.0; m],
        tmp_d: vec![0.0; d],
        tmp_m: vec![0.0; m],
    };
    if let Some(s) = start {
        if s.primal.len() == d {
            for i in 0..d {
                ws.x[i] = s.primal[i] / scaled.d[i];
            }
        }
        if s.duals.len() == m {
            for j in 0..m {
                ws.y[j] = scaled.c * s.duals[j] / scaled.e[j];
            }
        }
        scaled.a.matvec(&ws.x, &mut ws.z);
        for j in 0..m {
            ws.z[j] = ws.z[j].clamp(scaled.l[j], scaled.u[j]);
        }
    }

    // Previous check-point state for infeasibility certificates.
    let mut x_prev = ws.x.clone();
    let mut y_prev = ws.y.clone();

    let mut status = SolveStatus::MaxIterations;
    let mut iterations = config.max_iterations;

    let q_unscaled_norm = {
        let mut n = 0.0f64;
        for i in 0..d {
            n = n.max((scaled.q[i] / (scaled.c * scaled.d[i])).abs());
        }
        n
    };

    for k in 0..config.max_iterations {
        // x-update: solve K x~ = sigma x - q + A'(R z - y)
        for j in 0..m {
            ws.tmp_m[j] = rho[j] * ws.z[j] - ws.y[j];
        }
        scaled.a.matvec_t(&ws.tmp_m, &mut ws.tmp_d);
        for i in 0..d {
            ws.x_tilde[i] = config.sigma * ws.x[i] - scaled.q[i] + ws.tmp_d[i];
        }
        chol.solve_mut(&mut ws.x_tilde);

        // z-update with over-relaxation
        scaled.a.matvec(ws.x_tilde.as_slice(), &mut ws.ax);
        let alpha = config.alpha;
        for i in 0..d {
            ws.x[i] = alpha * ws.x_tilde[i] + (1.0 - alpha) * ws.x[i];
        }
        for j in 0..m {
            ws.v[j] = alpha * ws.ax[j] + (1.0 - alpha) * ws.z[j] + ws.y[j] / rho[j];
            ws.z[j] = ws.v[j].clamp(scaled.l[j], scaled.u[j]);
            ws.y[j] = rho[j] * (ws.v[j] - ws.z[j]);
        }

        if (k + 1) % config.check_interval != 0 {
            continue;
        }

        // Unscaled residuals.
        scaled.a.matvec(&ws.x, &mut ws.ax);
        let mut r_prim = 0.0f64;
        let mut ax_norm = 0.0f64;
        let mut z_norm = 0.0f64;
        for j in 0..m {
            let ax_u = ws.ax[j] / scaled.e[j];
            let z_u = ws.z[j] / scaled.e[j];
            r_prim = r_prim.max((ax_u - z_u).abs());
            ax_norm = ax_norm.max(ax_u.abs());
            z_norm = z_norm.max(z_u.abs());
        }

        // P x (scaled) into tmp_d
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += scaled.p[(i, j)] * ws.x[j];
            }
            ws.tmp_d[i] = acc;
        }
        let mut px_norm = 0.0f64;
        let mut r_dual = 0.0f64;
        let mut aty_norm = 0.0f64;
        let mut aty = vec![0.0; d];
        scaled.a.matvec_t(&ws.y, &mut aty);
        for i in 0..d {
            let denom = scaled.c * scaled.d[i];
            let px_u = ws.tmp_d[i] / denom;
            let aty_u = aty[i] / denom;
            let q_u = scaled.q[i] / denom;
            px_norm = px_norm.max(px_u.abs());
            aty_norm = aty_norm.max(aty_u.abs());
            r_dual = r_dual.max((px_u + q_u + aty_u).abs());
        }

        let eps_prim = config.eps_abs + config.eps_rel * ax_norm.max(z_norm);
        let eps_dual = config.eps_abs + config.eps_rel * px_norm.max(aty_norm).max(q_unscaled_norm);
        if r_prim <= eps_prim && r_dual <= eps_dual {
            status = SolveStatus::Optimal;
            iterations = k + 1;
            break;
        }

        // Infeasibility certificates from the drift since the last check.
        if let Some(s) = detect_infeasibility(qp, &scaled, &ws, &x_prev, &y_prev, config.eps_infeasible) {
            status = s;
            iterations = k + 1;
            break;
        }
        x_prev.copy_from_slice(&ws.x);
        y_prev.copy_from_slice(&ws.y);

        // Residual-balancing rho adaptation.
        if config.adaptive_rho && (k + 1) % (2 * config.check_interval) == 0 {
            let prim_rel = r_prim / ax_norm.max(z_norm).max(1e-12);
            let dual_rel = r_dual / px_norm.max(aty_norm).max(q_unscaled_norm).max(1e-12);
            if prim_rel > 0.0 && dual_rel > 0.0 {
                let proposal = (rho_base * (prim_rel / dual_rel).sqrt()).clamp(RHO_MIN, RHO_MAX);
                let ratio = proposal / rho_base;
                if !(1.0 / RHO_UPDATE_RATIO..=RHO_UPDATE_RATIO).contains(&ratio) {
                    rho_base = proposal;
                    rho = rho_rows(rho_base);
                    chol = factor(&scaled, config.sigma, &rho);
                }
            }
        }
    }

    // Unscale.
    let x: Vec<f64> = (0..d).map(|i| ws.x[i] * scaled.d[i]).collect();
    let y_signed: Vec<f64> = (0..m).map(|j| ws.y[j] * scaled.e[j] / scaled.c).collect();
    RawSolution { x, y_signed, status, iterations }
}

fn detect_infeasibility(
    qp: &QuadraticProgram,
    scaled: &Scaled,
    ws: &Workspace,
    x_prev: &[f64],
    y_prev: &[f64],
    eps: f64,
) -> Option<SolveStatus> {
    let d = scaled.q.len();
    let m = scaled.l.len();
    // Unscaled drifts.
    let dy: Vec<f64> = (0..m).map(|j| (ws.y[j] - y_prev[j]) * scaled.e[j] / scaled.c).collect();
    let dx: Vec<f64> = (0..d).map(|i| (ws.x[i] - x_prev[i]) * scaled.d[i]).collect();
    let l = qp.lower_bounds();
    let u = qp.upper_bounds();
    let a = qp.constraint_matrix();
    let p = qp.objective_matrix();
    let q = qp.objective_vector();

    let dy_norm = inf_norm(&dy);
    if dy_norm > 0.0 {
        let mut aty = vec![0.0; d];
        a.matvec_t(&dy, &mut aty);
        if inf_norm(&aty) <= eps * dy_norm {
            let mut support = 0.0;
            let mut valid = true;
            for j in 0..m {
                let pos = dy[j].max(0.0);
                let neg = dy[j].min(0.0);
                if pos > eps * dy_norm && u[j] == f64::INFINITY {
                    valid = false;
                    break;
                }
                if neg < -eps * dy_norm && l[j] == f64::NEG_INFINITY {
                    valid = false;
                    break;
                }
                if u[j].is_finite() {
                    support += u[j] * pos;
                }
                if l[j].is_finite() {
                    support += l[j] * neg;
                }
            }
            if valid && support <= -eps * dy_norm {
                return Some(SolveStatus::Infeasible);
            }
        }
    }

    let dx_norm = inf_norm(&dx);
    if dx_norm > 0.0 {
        let mut pdx = vec![0.0; d];
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += p[(i, j)] * dx[j];
            }
            pdx[i] = acc;
        }
        let qdx: f64 = q.iter().zip(&dx).map(|(qi, di)| qi * di).sum();
        if inf_norm(&pdx) <= eps * dx_norm && qdx <= -eps * dx_norm {
            let mut adx = vec![0.0; m];
            a.matvec(&dx, &mut adx);
            let mut valid = true;
            for j in 0..m {
                let v = adx[j];
                let ok = if l[j].is_finite() && u[j].is_finite() {
                    v.abs() <= eps * dx_norm
                } else if u[j] == f64::INFINITY && l[j].is_finite() {
                    v >= -eps * dx_norm
                } else if l[j] == f64::NEG_INFINITY && u[j].is_finite() {
                    v <= eps * dx_norm
                } else {
                    true
                };
                if !ok {
                    valid = false;
                    break;
                }
            }
            if valid {
                return Some(SolveStatus::Unbounded);
            }
        }
    }
    None
}
