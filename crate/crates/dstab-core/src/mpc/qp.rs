//! Dense convex quadratic programming:
//!
//! minimize ½·xᵀHx + gᵀx  subject to  Gx ≤ h
//!
//! solved by a Mehrotra-style predictor–corrector interior-point method
//! with an equality-constrained polish step on the detected active set.
//! Problems here are small (tens of variables, tens of rows), so all
//! algebra is dense.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Quadratic program data. `h_mat` must be symmetric positive
/// semidefinite; rows of `g_ineq` are upper bounds `g_ineq·x ≤ h_ineq`.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h_mat: DMatrix<f64>,
    pub g_vec: DVector<f64>,
    pub g_ineq: DMatrix<f64>,
    pub h_ineq: DVector<f64>,
}

/// Termination state of a QP solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

/// Solution with multipliers for every inequality row.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    /// Max-norm KKT residual (stationarity, feasibility, dual positivity,
    /// complementarity).
    pub kkt_residual: f64,
}

/// Solver tolerances and iteration caps.
#[derive(Debug, Clone, Copy)]
pub struct QpOptions {
    pub kkt_tol: f64,
    pub max_iters: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-8,
            max_iters: 60,
        }
    }
}

/// Max-norm KKT residual of a candidate primal–dual pair.
pub fn kkt_residual(p: &QpProblem, x: &DVector<f64>, lambda: &DVector<f64>) -> f64 {
    let stat = (&p.h_mat * x + &p.g_vec + p.g_ineq.transpose() * lambda)
        .iter()
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    let slack = &p.h_ineq - &p.g_ineq * x;
    let mut feas = 0.0_f64;
    let mut comp = 0.0_f64;
    let mut dual = 0.0_f64;
    for i in 0..slack.len() {
        feas = feas.max(-slack[i]);
        dual = dual.max(-lambda[i]);
        comp = comp.max((lambda[i] * slack[i]).abs());
    }
    stat.max(feas).max(dual).max(comp)
}

/// Solves the positive(-semi)definite system `m·x = rhs`, regularizing the
/// diagonal if the Cholesky factorization fails.
fn solve_spd(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(chol) = m.clone().cholesky() {
        return Ok(chol.solve(rhs));
    }
    let scale = m.diagonal().iter().fold(1.0_f64, |s, v| s.max(v.abs()));
    for reg in [1e-12, 1e-10, 1e-8] {
        let mut r = m.clone();
        for i in 0..r.nrows() {
            r[(i, i)] += reg * scale;
        }
        if let Some(chol) = r.cholesky() {
            return Ok(chol.solve(rhs));
        }
    }
    Err(Error::Solver(
        "KKT system is not positive definite even after regularization".into(),
    ))
}

/// Largest step α ∈ (0, 1] keeping `v + α·dv` strictly positive, shrunk by
/// the fraction-to-boundary factor `tau`.
fn max_step(v: &DVector<f64>, dv: &DVector<f64>, tau: f64) -> f64 {
    let mut alpha = 1.0_f64;
    for i in 0..v.len() {
        if dv[i] < 0.0 {
            alpha = alpha.min(-tau * v[i] / dv[i]);
        }
    }
    alpha.clamp(0.0, 1.0)
}

/// Equality-constrained solve on a fixed working set. Returns the primal
/// point and the working-set multipliers in row order.
fn eq_solve(p: &QpProblem, active: &[usize]) -> Option<(DVector<f64>, Vec<f64>)> {
    let n = p.g_vec.len();
    let na = active.len();
    let mut kkt = DMatrix::<f64>::zeros(n + na, n + na);
    kkt.view_mut((0, 0), (n, n)).copy_from(&p.h_mat);
    for (row, &ci) in active.iter().enumerate() {
        for j in 0..n {
            kkt[(n + row, j)] = p.g_ineq[(ci, j)];
            kkt[(j, n + row)] = p.g_ineq[(ci, j)];
        }
    }
    let mut rhs = DVector::<f64>::zeros(n + na);
    for j in 0..n {
        rhs[j] = -p.g_vec[j];
    }
    for (row, &ci) in active.iter().enumerate() {
        rhs[n + row] = p.h_ineq[ci];
    }
    let sol = kkt.full_piv_lu().solve(&rhs)?;
    let x = DVector::from_iterator(n, (0..n).map(|i| sol[i]));
    let mults = (0..na).map(|r| sol[n + r]).collect();
    Some((x, mults))
}

/// Re-solves the QP as an equality-constrained problem on the rows the
/// interior point deems active, removing the O(μ) interior smearing.
/// The working set is refined over a few rounds: rows whose multiplier
/// turns negative are dropped, rows the projection violates are added.
/// Returns the polished pair when a consistent set is found.
fn polish(
    p: &QpProblem,
    x_ip: &DVector<f64>,
    lambda_ip: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let m = p.h_ineq.len();
    let n = p.g_vec.len();
    let slack_scale = p.h_ineq.iter().fold(1.0_f64, |s, v| s.max(v.abs()));
    let slack = &p.h_ineq - &p.g_ineq * x_ip;
    // Seed with both strongly active rows (λ dominates the slack) and
    // weakly active ones the interior point left at O(μ/λ) distance.
    let mut active: Vec<usize> = (0..m)
        .filter(|&i| lambda_ip[i] > slack[i] || slack[i] < 1e-5 * slack_scale)
        .collect();
    if active.len() > n {
        // Keep the rows closest to their bound.
        active.sort_by(|&a, &b| slack[a].total_cmp(&slack[b]));
        active.truncate(n);
        active.sort_unstable();
    }

    for _round in 0..6 {
        let (x, mults) = eq_solve(p, &active)?;
        // Drop rows that want to pull away from their bound.
        let negatives: Vec<usize> = mults
            .iter()
            .enumerate()
            .filter(|(_, &l)| l < -1e-9)
            .map(|(r, _)| r)
            .collect();
        if !negatives.is_empty() {
            for &r in negatives.iter().rev() {
                active.remove(r);
            }
            continue;
        }
        // Add the worst violated inactive row, if any.
        let new_slack = &p.h_ineq - &p.g_ineq * &x;
        let mut worst: Option<(usize, f64)> = None;
        for i in 0..m {
            if active.contains(&i) {
                continue;
            }
            let v = -new_slack[i];
            if v > 1e-9 * slack_scale && worst.map(|(_, w)| v > w).unwrap_or(true) {
                worst = Some((i, v));
            }
        }
        if let Some((i, _)) = worst {
            if active.len() >= n {
                return None;
            }
            active.push(i);
            active.sort_unstable();
            continue;
        }
        let mut lambda = DVector::<f64>::zeros(m);
        for (row, &ci) in active.iter().enumerate() {
            lambda[ci] = mults[row].max(0.0);
        }
        return Some((x, lambda));
    }
    None
}

/// Interior-point solve with active-set polish.
pub fn solve_qp(p: &QpProblem, opts: &QpOptions) -> Result<QpSolution> {
    let n = p.g_vec.len();
    let m = p.h_ineq.len();
    if p.h_mat.nrows() != n || p.h_mat.ncols() != n {
        return Err(Error::BadInput(format!(
            "hessian is {}x{}, gradient has {n} entries",
            p.h_mat.nrows(),
            p.h_mat.ncols()
        )));
    }
    if p.g_ineq.nrows() != m || (m > 0 && p.g_ineq.ncols() != n) {
        return Err(Error::BadInput(format!(
            "constraint matrix is {}x{}, expected {m}x{n}",
            p.g_ineq.nrows(),
            p.g_ineq.ncols()
        )));
    }
    for v in p.h_mat.iter().chain(p.g_vec.iter()) {
        if !v.is_finite() {
            return Err(Error::NonFinite("qp objective data"));
        }
    }
    for v in p.g_ineq.iter().chain(p.h_ineq.iter()) {
        if !v.is_finite() {
            return Err(Error::NonFinite("qp constraint data"));
        }
    }

    // Unconstrained: one linear solve.
    if m == 0 {
        let x = solve_spd(&p.h_mat, &(-&p.g_vec))?;
        let lambda = DVector::zeros(0);
        let res = kkt_residual(p, &x, &lambda);
        return Ok(QpSolution {
            x,
            lambda,
            status: QpStatus::Optimal,
            iterations: 0,
            kkt_residual: res,
        });
    }

    // Row normalization: scale each constraint row to unit max-norm so the
    // barrier treats heterogeneous units evenly. Multipliers of the scaled
    // rows are λ·s, so they are divided back on exit.
    let mut row_scale = DVector::<f64>::from_element(m, 1.0);
    let mut g_s = p.g_ineq.clone();
    let mut h_s = p.h_ineq.clone();
    for i in 0..m {
        let norm = (0..n).map(|j| g_s[(i, j)].abs()).fold(0.0_f64, f64::max);
        if norm > 0.0 {
            row_scale[i] = 1.0 / norm;
            for j in 0..n {
                g_s[(i, j)] *= row_scale[i];
            }
            h_s[i] *= row_scale[i];
        }
    }
    let scaled = QpProblem {
        h_mat: p.h_mat.clone(),
        g_vec: p.g_vec.clone(),
        g_ineq: g_s,
        h_ineq: h_s,
    };

    // Initialization: unconstrained minimizer, slacks shifted ≥ 1.
    let diag_scale = scaled
        .h_mat
        .diagonal()
        .iter()
        .fold(1.0_f64, |s, v| s.max(v.abs()));
    let mut h_init = scaled.h_mat.clone();
    for i in 0..n {
        h_init[(i, i)] += 1e-10 * diag_scale;
    }
    let mut x = solve_spd(&h_init, &(-&scaled.g_vec))?;
    let mut s = &scaled.h_ineq - &scaled.g_ineq * &x;
    let shift = s.iter().fold(0.0_f64, |m, v| m.max(1.0 - v));
    for i in 0..m {
        s[i] += shift;
    }
    let mut lambda = DVector::<f64>::from_element(m, 1.0);

    let mut status = QpStatus::MaxIter;
    let mut iterations = opts.max_iters;
    let gt_s = scaled.g_ineq.transpose();
    let g_scale = scaled.g_vec.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let h_scale = scaled.h_ineq.iter().fold(1.0_f64, |m, v| m.max(v.abs()));

    for it in 0..opts.max_iters {
        // Residuals of the perturbed KKT system.
        let r_d = &scaled.h_mat * &x + &scaled.g_vec + &gt_s * &lambda;
        let r_p = &scaled.g_ineq * &x + &s - &scaled.h_ineq;
        let mu = s.dot(&lambda) / m as f64;

        let conv_d = r_d.iter().fold(0.0_f64, |a, v| a.max(v.abs())) <= opts.kkt_tol * g_scale;
        let conv_p = r_p.iter().fold(0.0_f64, |a, v| a.max(v.abs())) <= opts.kkt_tol * h_scale;
        if conv_d && conv_p && mu <= opts.kkt_tol {
            status = QpStatus::Optimal;
            iterations = it;
            break;
        }

        // Normal-equations matrix H + Gᵀ·diag(λ/s)·G, shared by the
        // predictor and corrector solves.
        let mut m_mat = scaled.h_mat.clone();
        for i in 0..m {
            let w = lambda[i] / s[i];
            for a in 0..n {
                let gia = scaled.g_ineq[(i, a)];
                if gia == 0.0 {
                    continue;
                }
                for b in 0..n {
                    m_mat[(a, b)] += w * gia * scaled.g_ineq[(i, b)];
                }
            }
        }
        let chol = match m_mat.clone().cholesky() {
            Some(c) => c,
            None => {
                let mut r = m_mat.clone();
                let ds = r.diagonal().iter().fold(1.0_f64, |s, v| s.max(v.abs()));
                for i in 0..n {
                    r[(i, i)] += 1e-12 * ds;
                }
                match r.cholesky() {
                    Some(c) => c,
                    // Lost definiteness means the barrier blew up, which
                    // happens when the rows admit no common point; stop and
                    // let the feasibility classifier below decide.
                    None => {
                        iterations = it;
                        break;
                    }
                }
            }
        };

        // Direction for a given complementarity target r_c (= SΛe − σμe − corr):
        // Δx = M⁻¹·(−r_d − Gᵀ·S⁻¹·(Λ·r_p − r_c))
        let direction = |r_c: &DVector<f64>| {
            let mut rhs = -&r_d;
            let mut tmp = DVector::<f64>::zeros(m);
            for i in 0..m {
                tmp[i] = (lambda[i] * r_p[i] - r_c[i]) / s[i];
            }
            rhs -= &gt_s * &tmp;
            let dx = chol.solve(&rhs);
            let mut dl = DVector::<f64>::zeros(m);
            let g_dx = &scaled.g_ineq * &dx;
            for i in 0..m {
                dl[i] = (lambda[i] * (g_dx[i] + r_p[i]) - r_c[i]) / s[i];
            }
            let mut dsv = DVector::<f64>::zeros(m);
            for i in 0..m {
                dsv[i] = -(r_c[i] + s[i] * dl[i]) / lambda[i];
            }
            (dx, dsv, dl)
        };

        // Predictor (affine) step.
        let r_c_aff = DVector::<f64>::from_iterator(m, (0..m).map(|i| s[i] * lambda[i]));
        let (_, ds_a, dl_a) = direction(&r_c_aff);
        let alpha_p = max_step(&s, &ds_a, 1.0);
        let alpha_d = max_step(&lambda, &dl_a, 1.0);
        let alpha_aff = alpha_p.min(alpha_d);
        let mu_aff = (0..m)
            .map(|i| (s[i] + alpha_aff * ds_a[i]) * (lambda[i] + alpha_aff * dl_a[i]))
            .sum::<f64>()
            / m as f64;
        let sigma = if mu > 0.0 {
            (mu_aff / mu).powi(3).clamp(0.0, 1.0)
        } else {
            0.0
        };

        // Corrector with Mehrotra's second-order term.
        let r_c = DVector::<f64>::from_iterator(
            m,
            (0..m).map(|i| s[i] * lambda[i] + ds_a[i] * dl_a[i] - sigma * mu),
        );
        let (dx, ds, dl) = direction(&r_c);
        let tau = 0.995_f64.min(1.0 - mu.min(0.1));
        let alpha = max_step(&s, &ds, tau).min(max_step(&lambda, &dl, tau));
        let x_old = x.clone();
        let l_old = lambda.clone();
        x += alpha * &dx;
        s += alpha * &ds;
        lambda += alpha * &dl;
        // A diverging barrier (no common feasible point, or extreme
        // conditioning) eventually produces non-finite iterates; keep the
        // last finite point for the feasibility classification below.
        let finite = x.iter().all(|v| v.is_finite())
            && s.iter().all(|v| v.is_finite())
            && lambda.iter().all(|v| v.is_finite());
        if !finite {
            x = x_old;
            lambda = l_old;
            iterations = it;
            break;
        }
    }

    // Undo the row scaling on the multipliers.
    let mut lambda_out = DVector::<f64>::zeros(m);
    for i in 0..m {
        lambda_out[i] = lambda[i] * row_scale[i];
    }

    if status == QpStatus::MaxIter {
        // Distinguish primal infeasibility from slow tail convergence.
        let viol = (&p.g_ineq * &x - &p.h_ineq)
            .iter()
            .fold(0.0_f64, |m, v| m.max(*v));
        let scale = p.h_ineq.iter().fold(1.0_f64, |s, v| s.max(v.abs()));
        if viol > 1e-6 * scale {
            let res = kkt_residual(p, &x, &lambda_out);
            return Ok(QpSolution {
                x,
                lambda: lambda_out,
                status: QpStatus::Infeasible,
                iterations,
                kkt_residual: res,
            });
        }
    }

    // Polish: exact solve on the active set removes the interior bias.
    if let Some((xp, lp)) = polish(p, &x, &(lambda_out.clone())) {
        let res_p = kkt_residual(p, &xp, &lp);
        let res_ip = kkt_residual(p, &x, &lambda_out);
        if res_p <= res_ip {
            return Ok(QpSolution {
                x: xp,
                lambda: lp,
                status,
                iterations,
                kkt_residual: res_p,
            });
        }
    }
    let res = kkt_residual(p, &x, &lambda_out);
    Ok(QpSolution {
        x,
        lambda: lambda_out,
        status,
        iterations,
        kkt_residual: res,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn qp(
        h: Vec<f64>,
        g: Vec<f64>,
        rows: Vec<Vec<f64>>,
        rhs: Vec<f64>,
    ) -> QpProblem {
        let n = g.len();
        let m = rhs.len();
        QpProblem {
            h_mat: DMatrix::from_row_slice(n, n, &h),
            g_vec: DVector::from_vec(g),
            g_ineq: if m == 0 {
                DMatrix::zeros(0, n)
            } else {
                DMatrix::from_fn(m, n, |i, j| rows[i][j])
            },
            h_ineq: DVector::from_vec(rhs),
        }
    }

    #[test]
    fn unconstrained_scalar_minimizer() {
        let p = qp(vec![2.0], vec![-4.0], vec![], vec![]);
        let sol = solve_qp(&p, &QpOptions::default()).unwrap();
        assert_relative_eq!(sol.x[0], 2.0, max_relative = 1e-10);
        assert_eq!(sol.status, QpStatus::Optimal);
    }

    #[test]
    fn active_bound_yields_unit_multiplier() {
        // min ½(x−2)² s.t. x ≤ 1 → x = 1, λ = 1.
        let p = qp(vec![1.0], vec![-2.0], vec![vec![1.0]], vec![1.0]);
        let sol = solve_qp(&p, &QpOptions::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(sol.lambda[0], 1.0, epsilon = 1e-8);
        assert!(sol.kkt_residual < 1e-8);
    }

    #[test]
    fn inactive_constraints_carry_zero_multipliers() {
        let p = qp(
            vec![2.0, 0.0, 0.0, 2.0],
            vec![-2.0, -2.0],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![5.0, 5.0],
        );
        let sol = solve_qp(&p, &QpOptions::default()).unwrap();
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(sol.x[1], 1.0, epsilon = 1e-9);
        assert!(sol.lambda[0].abs() < 1e-9);
        assert!(sol.lambda[1].abs() < 1e-9);
    }

    #[test]
    fn coupled_active_constraints() {
        // min ½‖x − (2, 2)‖² s.t. x₁ + x₂ ≤ 2, x₁ − x₂ ≤ 0
        // → x = (1, 1), λ = (1, 0).
        let p = qp(
            vec![1.0, 0.0, 0.0, 1.0],
            vec![-2.0, -2.0],
            vec![vec![1.0, 1.0], vec![1.0, -1.0]],
            vec![2.0, 0.0],
        );
        let sol = solve_qp(&p, &QpOptions::default()).unwrap();
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(sol.x[1], 1.0, epsilon = 1e-9);
        assert_relative_eq!(sol.lambda[0], 1.0, epsilon = 1e-8);
        assert!(sol.lambda[1].abs() < 1e-8);
    }

    #[test]
    fn contradictory_rows_report_infeasibility() {
        // x ≤ 0 and −x ≤ −1 cannot hold together.
        let p = qp(
            vec![1.0],
            vec![0.0],
            vec![vec![1.0], vec![-1.0]],
            vec![0.0, -1.0],
        );
        let sol = solve_qp(&p, &QpOptions::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    /// Brute-force oracle: enumerate every active subset, solve the
    /// equality-constrained stationarity system, keep the best feasible
    /// candidate with nonnegative multipliers.
    fn active_set_oracle(p: &QpProblem) -> Option<(DVector<f64>, f64)> {
        let n = p.g_vec.len();
        let m = p.h_ineq.len();
        let mut best: Option<(DVector<f64>, f64)> = None;
        for mask in 0..(1usize << m) {
            let active: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
            let na = active.len();
            if na > n {
                continue;
            }
            let mut kkt = DMatrix::<f64>::zeros(n + na, n + na);
            kkt.view_mut((0, 0), (n, n)).copy_from(&p.h_mat);
            for (r, &ci) in active.iter().enumerate() {
                for j in 0..n {
                    kkt[(n + r, j)] = p.g_ineq[(ci, j)];
                    kkt[(j, n + r)] = p.g_ineq[(ci, j)];
                }
            }
            let mut rhs = DVector::<f64>::zeros(n + na);
            for j in 0..n {
                rhs[j] = -p.g_vec[j];
            }
            for (r, &ci) in active.iter().enumerate() {
                rhs[n + r] = p.h_ineq[ci];
            }
            let Some(sol) = kkt.full_piv_lu().solve(&rhs) else {
                continue;
            };
            let x = DVector::from_iterator(n, (0..n).map(|i| sol[i]));
            if active.iter().enumerate().any(|(r, _)| sol[n + r] < -1e-9) {
                continue;
            }
            let slack = &p.h_ineq - &p.g_ineq * &x;
            if slack.iter().any(|v| *v < -1e-9) {
                continue;
            }
            let cost = 0.5 * (&p.h_mat * &x).dot(&x) + p.g_vec.dot(&x);
            if best.as_ref().is_none_or(|(_, c)| cost < *c) {
                best = Some((x, cost));
            }
        }
        best
    }

    #[test]
    fn randomized_instances_match_the_active_set_oracle() {
        // Seeded LCG keeps the instances frozen.
        let mut state: u64 = 42;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for inst in 0..30 {
            let n = 1 + (inst % 3);
            let m = 1 + (inst % 4);
            // H = LᵀL + I keeps strict convexity.
            let l = DMatrix::from_fn(n, n, |_, _| next());
            let h = l.transpose() * &l + DMatrix::identity(n, n);
            let g = DVector::from_fn(n, |_, _| 2.0 * next());
            let g_ineq = DMatrix::from_fn(m, n, |_, _| next());
            // Bias rhs upward so most instances are feasible around 0.
            let h_ineq = DVector::from_fn(m, |_, _| next().abs() + 0.1);
            let p = QpProblem {
                h_mat: h,
                g_vec: g,
                g_ineq,
                h_ineq,
            };
            let sol = solve_qp(&p, &QpOptions::default()).unwrap();
            assert_eq!(sol.status, QpStatus::Optimal, "instance {inst}");
            assert!(
                sol.kkt_residual < 1e-8,
                "instance {inst}: kkt {}",
                sol.kkt_residual
            );
            let (x_ref, cost_ref) = active_set_oracle(&p).expect("oracle found no optimum");
            let cost = 0.5 * (&p.h_mat * &sol.x).dot(&sol.x) + p.g_vec.dot(&sol.x);
            assert!(
                (cost - cost_ref).abs() < 1e-7 * (1.0 + cost_ref.abs()),
                "instance {inst}: cost {cost} vs oracle {cost_ref}"
            );
            for j in 0..n {
                assert!(
                    (sol.x[j] - x_ref[j]).abs() < 1e-6,
                    "instance {inst} var {j}: {} vs {}",
                    sol.x[j],
                    x_ref[j]
                );
            }
            // Complementarity products stay tiny at optimality.
            let slack = &p.h_ineq - &p.g_ineq * &sol.x;
            for i in 0..m {
                assert!((sol.lambda[i] * slack[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn solves_are_bitwise_deterministic() {
        let p = qp(
            vec![3.0, 0.5, 0.5, 2.0],
            vec![-1.0, 0.7],
            vec![vec![1.0, 1.0], vec![-1.0, 0.3]],
            vec![0.4, 0.9],
        );
        let a = solve_qp(&p, &QpOptions::default()).unwrap();
        let b = solve_qp(&p, &QpOptions::default()).unwrap();
        assert_eq!(a.x.as_slice(), b.x.as_slice());
        assert_eq!(a.lambda.as_slice(), b.lambda.as_slice());
    }

    #[test]
    fn badly_scaled_rows_still_converge() {
        // Same feasible set as the unit-bound problem, rows scaled by 1e6.
        let p = qp(
            vec![1.0],
            vec![-2.0],
            vec![vec![1e6]],
            vec![1e6],
        );
        let sol = solve_qp(&p, &QpOptions::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-8);
        // The multiplier scales inversely with the row.
        assert_relative_eq!(sol.lambda[0], 1e-6, max_relative = 1e-6);
    }
}
