//! Solves an [`MpcProblem`]: condensation to a dense QP, sequential
//! linearization for smooth constraint rows, quadratic slack softening of
//! adversarial rows, and KKT bookkeeping for the inverse layer.

use super::problem::{
    condense, condensed_cost, constraint_value, linearize_constraint, Condensed, ConstraintKind,
    MpcProblem,
};
use super::qp::{self, QpOptions, QpProblem, QpStatus};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Default quadratic penalty on adversarial slack variables.
pub const DEFAULT_SLACK_WEIGHT: f64 = 1e4;
/// Feasibility tolerance for nonlinear constraint values at the solution.
pub const FEAS_TOL: f64 = 1e-6;
/// Slack magnitude above which a softened solve is reported as such.
pub const SLACK_REPORT_TOL: f64 = 1e-8;
/// Outer iteration cap of the sequential linearization loop.
pub const MAX_OUTER: usize = 30;
/// Trust-region half-width on each control entry per outer iteration.
pub const TRUST_CONTROL: f64 = 10.0;
/// Trust-region half-width on the tracked output per outer iteration.
pub const TRUST_OUTPUT: f64 = 0.2;

/// Where a QP row came from, for multiplier back-mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowOrigin {
    /// Index into `MpcProblem::constraints`.
    Constraint(usize),
    /// Positivity bound of slack variable j.
    SlackPositivity(usize),
    /// Internal trust-region row (absent from the final clean solve).
    TrustRegion,
}

/// Final-linearization KKT data retained for sensitivity analysis.
#[derive(Debug, Clone)]
pub struct RawKkt {
    pub h_mat: DMatrix<f64>,
    pub g_vec: DVector<f64>,
    pub g_ineq: DMatrix<f64>,
    pub h_ineq: DVector<f64>,
    /// Decision vector [stacked controls; slacks].
    pub z: DVector<f64>,
    pub lambda: DVector<f64>,
    /// Length of the control part of `z`.
    pub n_u: usize,
    pub row_origin: Vec<RowOrigin>,
    /// Constant cost term so `cost = ½zᵀHz + gᵀz + c0`.
    pub c0: f64,
}

/// Termination state of an MPC solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    /// Optimal after quadratic slack relaxation of adversarial rows, with
    /// at least one slack above the reporting tolerance.
    SoftenedOptimal,
    Infeasible,
    MaxIter,
}

/// Solution artifact: controls, predictions, multipliers, slacks.
#[derive(Debug, Clone)]
pub struct MpcSolution {
    /// One control vector per stage, length N.
    pub controls: Vec<DVector<f64>>,
    /// Predicted states x_0..x_N under those controls.
    pub states: Vec<DVector<f64>>,
    /// One multiplier per problem constraint, in definition order.
    pub multipliers: Vec<f64>,
    /// Slack values per adversarial constraint (definition order); empty
    /// when the solve was hard.
    pub slacks: Vec<f64>,
    /// Objective value including any slack penalty.
    pub cost: f64,
    /// Max-norm KKT residual at the final linearization.
    pub kkt_residual: f64,
    pub status: SolveStatus,
    /// Raw KKT data at the solution for sensitivity analysis.
    pub raw: RawKkt,
}

impl MpcSolution {
    /// Stacked control vector (no slacks).
    pub fn stacked_controls(&self) -> DVector<f64> {
        let m = self.controls.first().map_or(0, |c| c.len());
        let mut u = DVector::zeros(self.controls.len() * m);
        for (k, c) in self.controls.iter().enumerate() {
            for j in 0..m {
                u[k * m + j] = c[j];
            }
        }
        u
    }

    /// First-stage control, the one a receding-horizon loop applies.
    pub fn first_control(&self) -> &DVector<f64> {
        &self.controls[0]
    }
}

/// Marks every adversarial constraint soft: each row `w ≤ 0` becomes
/// `w ≤ s, s ≥ 0` with `slack_weight·s²` added to the cost. Stealth rows
/// are untouched.
pub fn soften(problem: &MpcProblem, slack_weight: f64) -> Result<MpcProblem> {
    if !(slack_weight > 0.0) {
        return Err(Error::BadInput(format!(
            "slack_weight must be positive, got {slack_weight}"
        )));
    }
    let mut p = problem.clone();
    p.slack_weight = Some(slack_weight);
    Ok(p)
}

/// Assembled QP plus the row-origin map.
struct Assembled {
    qp: QpProblem,
    row_origin: Vec<RowOrigin>,
    n_u: usize,
    n_slack: usize,
    c0: f64,
}

/// Builds the dense QP at linearization point `u_lin`, optionally boxing
/// the step inside a trust region centered there.
fn assemble(
    p: &MpcProblem,
    cond: &Condensed,
    u_lin: &DVector<f64>,
    trust: bool,
) -> Assembled {
    let n_u = p.horizon * p.control_dim;
    let softened = p.slack_weight.is_some();
    let slack_map: Vec<usize> = if softened {
        p.constraints
            .iter()
            .enumerate()
            .filter(|(_, c)| c.kind == ConstraintKind::Adversarial)
            .map(|(i, _)| i)
            .collect()
    } else {
        Vec::new()
    };
    let n_slack = slack_map.len();
    let n_z = n_u + n_slack;

    let (h_u, g_u, c0) = condensed_cost(p, cond);
    let mut h = DMatrix::<f64>::zeros(n_z, n_z);
    h.view_mut((0, 0), (n_u, n_u)).copy_from(&h_u);
    if let Some(w) = p.slack_weight {
        for j in 0..n_slack {
            h[(n_u + j, n_u + j)] = 2.0 * w;
        }
    }
    let mut g = DVector::<f64>::zeros(n_z);
    g.rows_mut(0, n_u).copy_from(&g_u);

    let mut rows: Vec<(DVector<f64>, f64, RowOrigin)> = Vec::new();
    for (i, def) in p.constraints.iter().enumerate() {
        let (row_u, rhs) = linearize_constraint(def, cond, u_lin);
        let mut row = DVector::<f64>::zeros(n_z);
        row.rows_mut(0, n_u).copy_from(&row_u);
        if softened && def.kind == ConstraintKind::Adversarial {
            let j = slack_map.iter().position(|&c| c == i).unwrap();
            row[n_u + j] = -1.0;
        }
        rows.push((row, rhs, RowOrigin::Constraint(i)));
    }
    for j in 0..n_slack {
        let mut row = DVector::<f64>::zeros(n_z);
        row[n_u + j] = -1.0;
        rows.push((row, 0.0, RowOrigin::SlackPositivity(j)));
    }
    if trust {
        // |u_i − u_lin_i| ≤ TRUST_CONTROL·control_scale-agnostic box.
        for i in 0..n_u {
            let mut up = DVector::<f64>::zeros(n_z);
            up[i] = 1.0;
            rows.push((up, u_lin[i] + TRUST_CONTROL, RowOrigin::TrustRegion));
            let mut dn = DVector::<f64>::zeros(n_z);
            dn[i] = -1.0;
            rows.push((dn, -(u_lin[i] - TRUST_CONTROL), RowOrigin::TrustRegion));
        }
        // |wᵀ(x_k(u) − x_k(u_lin))| ≤ TRUST_OUTPUT for each predicted stage.
        for k in 1..=p.horizon {
            let row_u = (p.cost.w_track.transpose() * &cond.t_mats[k]).transpose();
            if row_u.iter().all(|v| *v == 0.0) {
                continue;
            }
            let center = row_u.dot(u_lin);
            let mut up = DVector::<f64>::zeros(n_z);
            up.rows_mut(0, n_u).copy_from(&row_u);
            rows.push((up, center + TRUST_OUTPUT, RowOrigin::TrustRegion));
            let mut dn = DVector::<f64>::zeros(n_z);
            dn.rows_mut(0, n_u).copy_from(&(-&row_u));
            rows.push((dn, -(center - TRUST_OUTPUT), RowOrigin::TrustRegion));
        }
    }

    let m = rows.len();
    let mut g_ineq = DMatrix::<f64>::zeros(m, n_z);
    let mut h_ineq = DVector::<f64>::zeros(m);
    let mut row_origin = Vec::with_capacity(m);
    for (i, (row, rhs, origin)) in rows.into_iter().enumerate() {
        for j in 0..n_z {
            g_ineq[(i, j)] = row[j];
        }
        h_ineq[i] = rhs;
        row_origin.push(origin);
    }
    Assembled {
        qp: QpProblem {
            h_mat: h,
            g_vec: g,
            g_ineq,
            h_ineq,
        },
        row_origin,
        n_u,
        n_slack,
        c0,
    }
}

/// Packages a QP solution into the MPC artifact.
fn finish(
    p: &MpcProblem,
    cond: &Condensed,
    asm: Assembled,
    qp_sol: qp::QpSolution,
    status: SolveStatus,
) -> MpcSolution {
    let n_u = asm.n_u;
    let u = DVector::from_iterator(n_u, (0..n_u).map(|i| qp_sol.x[i]));
    let controls: Vec<DVector<f64>> = (0..p.horizon)
        .map(|k| {
            DVector::from_iterator(
                p.control_dim,
                (0..p.control_dim).map(|j| u[k * p.control_dim + j]),
            )
        })
        .collect();
    let states: Vec<DVector<f64>> = (0..=p.horizon)
        .map(|k| &cond.t_mats[k] * &u + &cond.t_offs[k])
        .collect();
    let mut multipliers = vec![0.0; p.constraints.len()];
    for (row, origin) in asm.row_origin.iter().enumerate() {
        if let RowOrigin::Constraint(ci) = origin {
            multipliers[*ci] = qp_sol.lambda[row];
        }
    }
    let mut slacks = vec![0.0; asm.n_slack];
    for j in 0..asm.n_slack {
        slacks[j] = qp_sol.x[n_u + j];
    }
    let cost = 0.5 * (&asm.qp.h_mat * &qp_sol.x).dot(&qp_sol.x) + asm.qp.g_vec.dot(&qp_sol.x)
        + asm.c0;
    let status = match status {
        SolveStatus::Optimal if slacks.iter().any(|s| *s > SLACK_REPORT_TOL) => {
            SolveStatus::SoftenedOptimal
        }
        s => s,
    };
    MpcSolution {
        controls,
        states,
        multipliers,
        slacks,
        cost,
        kkt_residual: qp_sol.kkt_residual,
        status,
        raw: RawKkt {
            h_mat: asm.qp.h_mat,
            g_vec: asm.qp.g_vec,
            g_ineq: asm.qp.g_ineq,
            h_ineq: asm.qp.h_ineq,
            z: qp_sol.x,
            lambda: qp_sol.lambda,
            n_u,
            row_origin: asm.row_origin,
            c0: asm.c0,
        },
    }
}

/// Solves the problem. All-affine problems go through a single QP;
/// problems with smooth rows run a sequential-linearization loop with a
/// per-iteration trust region. An infeasible hard problem with
/// adversarial rows is retried with quadratic slack softening.
pub fn solve(problem: &MpcProblem) -> Result<MpcSolution> {
    problem.validate()?;
    let cond = condense(problem);
    let has_smooth = problem.constraints.iter().any(|c| {
        matches!(
            c.form,
            super::problem::ConstraintForm::Smooth { .. }
        )
    });
    let opts = QpOptions::default();

    let mut eff = problem.clone();
    let zero = DVector::<f64>::zeros(problem.horizon * problem.control_dim);

    if !has_smooth {
        let asm = assemble(&eff, &cond, &zero, false);
        let sol = qp::solve_qp(&asm.qp, &opts)?;
        match sol.status {
            QpStatus::Optimal => return Ok(finish(&eff, &cond, asm, sol, SolveStatus::Optimal)),
            QpStatus::MaxIter => return Ok(finish(&eff, &cond, asm, sol, SolveStatus::MaxIter)),
            QpStatus::Infeasible => {
                if eff.slack_weight.is_none() && eff.adversarial_count() > 0 {
                    eff = soften(&eff, DEFAULT_SLACK_WEIGHT)?;
                    let asm = assemble(&eff, &cond, &zero, false);
                    let sol = qp::solve_qp(&asm.qp, &opts)?;
                    let status = match sol.status {
                        QpStatus::Optimal => SolveStatus::Optimal,
                        QpStatus::MaxIter => SolveStatus::MaxIter,
                        QpStatus::Infeasible => SolveStatus::Infeasible,
                    };
                    return Ok(finish(&eff, &cond, asm, sol, status));
                }
                return Ok(finish(&eff, &cond, asm, sol, SolveStatus::Infeasible));
            }
        }
    }

    // Sequential linearization: re-linearize smooth rows about the last
    // iterate inside a trust region until the iterate stops moving, then
    // confirm with a clean solve without the trust rows.
    let mut u_cur = zero.clone();
    let mut outer_status = SolveStatus::MaxIter;
    let mut final_pack: Option<(Assembled, qp::QpSolution)> = None;
    let conv_tol = 1e-9;
    for _outer in 0..MAX_OUTER {
        let asm = assemble(&eff, &cond, &u_cur, true);
        let sol = qp::solve_qp(&asm.qp, &opts)?;
        if sol.status == QpStatus::Infeasible {
            if eff.slack_weight.is_none() && eff.adversarial_count() > 0 {
                eff = soften(&eff, DEFAULT_SLACK_WEIGHT)?;
                continue;
            }
            return Ok(finish(&eff, &cond, asm, sol, SolveStatus::Infeasible));
        }
        let u_new = DVector::from_iterator(u_cur.len(), (0..u_cur.len()).map(|i| sol.x[i]));
        let step = (&u_new - &u_cur)
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        u_cur = u_new;
        if step <= conv_tol * u_cur.iter().fold(1.0_f64, |m, v| m.max(v.abs())) {
            // Clean confirmation solves without trust rows, iterated to the
            // fixed point of the linearization map so downstream finite
            // differences of the optimum are reproducible at machine level.
            let mut best: Option<(f64, Assembled, qp::QpSolution)> = None;
            let mut hit_infeasible: Option<(Assembled, qp::QpSolution)> = None;
            for _clean in 0..8 {
                let asm_f = assemble(&eff, &cond, &u_cur, false);
                let sol_f = qp::solve_qp(&asm_f.qp, &opts)?;
                if sol_f.status == QpStatus::Infeasible {
                    hit_infeasible = Some((asm_f, sol_f));
                    break;
                }
                let u_clean =
                    DVector::from_iterator(u_cur.len(), (0..u_cur.len()).map(|i| sol_f.x[i]));
                let drift = (&u_clean - &u_cur)
                    .iter()
                    .fold(0.0_f64, |m, v| m.max(v.abs()));
                u_cur = u_clean;
                let keep = best.as_ref().map(|(d, _, _)| drift <= *d).unwrap_or(true);
                if keep {
                    best = Some((drift, asm_f, sol_f));
                }
                if drift <= 1e-13 * u_cur.iter().fold(1.0_f64, |m, v| m.max(v.abs())) {
                    break;
                }
            }
            if let Some((asm_f, sol_f)) = hit_infeasible {
                return Ok(finish(&eff, &cond, asm_f, sol_f, SolveStatus::Infeasible));
            }
            if let Some((drift, asm_f, sol_f)) = best {
                final_pack = Some((asm_f, sol_f));
                if drift <= 1e-8 * u_cur.iter().fold(1.0_f64, |m, v| m.max(v.abs())) {
                    outer_status = SolveStatus::Optimal;
                    break;
                }
            }
        }
    }
    let (asm, sol) = match final_pack {
        Some(p) => p,
        None => {
            // Never reached a stable point: report the best iterate from a
            // clean assembly at the last linearization.
            let asm = assemble(&eff, &cond, &u_cur, false);
            let sol = qp::solve_qp(&asm.qp, &opts)?;
            (asm, sol)
        }
    };
    let mut status = match (outer_status, sol.status) {
        (SolveStatus::Optimal, QpStatus::Optimal) => SolveStatus::Optimal,
        (SolveStatus::Optimal, QpStatus::MaxIter) => SolveStatus::MaxIter,
        (SolveStatus::Optimal, QpStatus::Infeasible) => SolveStatus::Infeasible,
        (s, _) => s,
    };
    // Nonlinear feasibility audit of stealth rows at the converged point.
    let u_final = DVector::from_iterator(u_cur.len(), (0..u_cur.len()).map(|i| sol.x[i]));
    for def in eff
        .constraints
        .iter()
        .filter(|c| c.kind == ConstraintKind::Stealth)
    {
        let x_k = &cond.t_mats[def.stage] * &u_final + &cond.t_offs[def.stage];
        if constraint_value(def, &x_k, &u_final) > FEAS_TOL && status == SolveStatus::Optimal {
            status = SolveStatus::MaxIter;
        }
    }
    Ok(finish(&eff, &cond, asm, sol, status))
}

/// Recomputes the max-norm KKT residual (stationarity, primal and dual
/// feasibility, complementarity) of a solution by reassembling the QP at
/// the solution's own linearization point.
pub fn kkt_residual(problem: &MpcProblem, solution: &MpcSolution) -> f64 {
    let mut eff = problem.clone();
    if !solution.slacks.is_empty() && eff.slack_weight.is_none() {
        eff.slack_weight = Some(DEFAULT_SLACK_WEIGHT);
    }
    let cond = condense(&eff);
    let n_u = solution.raw.n_u;
    let u = DVector::from_iterator(n_u, (0..n_u).map(|i| solution.raw.z[i]));
    let asm = assemble(&eff, &cond, &u, false);
    // Multipliers map one-to-one because the clean assembly has the same
    // row order as the stored raw system.
    qp::kkt_residual(&asm.qp, &solution.raw.z, &solution.raw.lambda)
}

/// Structured text dump of one solve for verbose diagnostics.
pub fn debug_dump(problem: &MpcProblem, solution: &MpcSolution) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "mpc solve: horizon {}, state_dim {}, control_dim {}, {} constraints\n",
        problem.horizon,
        problem.state_dim,
        problem.control_dim,
        problem.constraints.len()
    ));
    s.push_str(&format!(
        "status {:?}, cost {:.6e}, kkt residual {:.3e}\n",
        solution.status, solution.cost, solution.kkt_residual
    ));
    s.push_str("controls:");
    for c in &solution.controls {
        for v in c.iter() {
            s.push_str(&format!(" {v:.6}"));
        }
    }
    s.push('\n');
    s.push_str("active constraints (multiplier > 1e-8):\n");
    for (i, def) in problem.constraints.iter().enumerate() {
        if solution.multipliers[i] > 1e-8 {
            s.push_str(&format!(
                "  [{}] stage {} {:?} lambda {:.6e}\n",
                def.label, def.stage, def.kind, solution.multipliers[i]
            ));
        }
    }
    if !solution.slacks.is_empty() {
        s.push_str(&format!("slacks: {:?}\n", solution.slacks));
    }
    s
}
