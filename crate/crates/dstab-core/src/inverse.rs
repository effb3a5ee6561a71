//! Bi-level inverse fitting of the low-fidelity controller weights: find
//! θ = (q, r) whose receding-horizon first controls reproduce a recorded
//! control sequence. Gradients come from implicit differentiation of the
//! per-step KKT systems with the active set held fixed, cross-checked (and
//! backed up) by a central finite-difference oracle.

use crate::error::{Error, Result};
use crate::mpc::builders::{build_low_fidelity_problem, Limits};
use crate::mpc::problem::{
    condense, condensed_cost, constraint_value, linearize_constraint, ConstraintForm, MpcProblem,
};
use crate::mpc::solve::{solve, MpcSolution, SolveStatus};
use crate::rint::{step_soc, EcmState, RintParams};
use nalgebra::{DMatrix, DVector};

/// Lower-level cost weights being fitted.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ThetaParams {
    /// Tracking weight, ≥ 0.
    pub q: f64,
    /// Control-effort weight, ≥ 0.
    pub r: f64,
}

impl ThetaParams {
    pub fn new(q: f64, r: f64) -> Self {
        ThetaParams { q, r }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.q.is_finite() || !self.r.is_finite() {
            return Err(Error::InvalidParam(format!(
                "theta must be finite, got ({}, {})",
                self.q, self.r
            )));
        }
        if self.q < 0.0 || self.r < 0.0 || self.q + self.r <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "theta requires q, r >= 0 and q + r > 0, got ({}, {})",
                self.q, self.r
            )));
        }
        Ok(())
    }

    /// Scales onto the q + r = 1 slice; the loss is invariant under
    /// positive scaling, so this removes the null direction.
    pub fn normalized(&self) -> Self {
        let s = self.q + self.r;
        ThetaParams {
            q: self.q / s,
            r: self.r / s,
        }
    }

    /// Identifiable quantity: the tracking-to-effort ratio.
    pub fn ratio(&self) -> f64 {
        self.q / self.r
    }
}

/// How each per-step lower-level problem gets its initial state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Anchoring {
    /// Per-step state pinned to the recorded run (default): step t starts
    /// from the recorded (soc, held current) pair, so the t terms of the
    /// loss are independent.
    ReplayAnchored,
    /// The low-fidelity loop rolls forward under the candidate θ from z0;
    /// state sensitivities are chained through the rollout.
    FreeRolling,
}

/// Everything needed to replay the lower-level controller: the defender's
/// circuit model, operating limits, horizon geometry, and the per-step
/// state source.
#[derive(Debug, Clone)]
pub struct FitScenario {
    pub rint: RintParams,
    pub limits: Limits,
    pub horizon: usize,
    /// Control period in seconds.
    pub dt_ctrl: f64,
    pub anchoring: Anchoring,
    /// Per step t: (bulk soc, held current in amperes) from the recorded
    /// run. Required (and length-checked) for replay anchoring.
    pub anchors: Vec<(f64, f64)>,
    /// Start state (soc, held current in amperes) for free rolling.
    pub z0: (f64, f64),
}

impl FitScenario {
    fn validate(&self, t_len: usize) -> Result<()> {
        self.rint.validate()?;
        self.limits.validate()?;
        if self.horizon == 0 {
            return Err(Error::BadInput("scenario horizon must be at least 1".into()));
        }
        if !(self.dt_ctrl > 0.0) {
            return Err(Error::BadInput(format!(
                "scenario control period must be > 0, got {}",
                self.dt_ctrl
            )));
        }
        if t_len == 0 {
            return Err(Error::BadInput("empty control sequence".into()));
        }
        if self.anchoring == Anchoring::ReplayAnchored && self.anchors.len() != t_len {
            return Err(Error::BadInput(format!(
                "{} anchors for {} control steps",
                self.anchors.len(),
                t_len
            )));
        }
        Ok(())
    }
}

/// One lower-level solve; non-optimal statuses become errors carrying the
/// closed-loop step index.
fn lower_solve(
    scenario: &FitScenario,
    theta: &ThetaParams,
    soc: f64,
    i_prev: f64,
    step: usize,
) -> Result<(MpcProblem, MpcSolution)> {
    let problem = build_low_fidelity_problem(
        &scenario.rint,
        (theta.q, theta.r),
        &scenario.limits,
        soc,
        i_prev,
        scenario.horizon,
        scenario.dt_ctrl,
    )
    .map_err(|e| Error::LowerLevel {
        step,
        reason: e.to_string(),
    })?;
    let sol = solve(&problem).map_err(|e| Error::LowerLevel {
        step,
        reason: e.to_string(),
    })?;
    if sol.status != SolveStatus::Optimal {
        return Err(Error::LowerLevel {
            step,
            reason: format!("solve ended with status {:?}", sol.status),
        });
    }
    Ok((problem, sol))
}

/// Per-step states visited during one loss evaluation and the matching
/// first controls.
struct Rollout {
    /// Visited (soc, held current) pairs; used when a rollout's states
    /// become the anchors of a subsequent replay-anchored fit.
    #[allow(dead_code)]
    states: Vec<(f64, f64)>,
    u0: Vec<f64>,
}

fn roll_states(
    scenario: &FitScenario,
    theta: &ThetaParams,
    t_len: usize,
) -> Result<Rollout> {
    let mut states = Vec::with_capacity(t_len);
    let mut u0 = Vec::with_capacity(t_len);
    match scenario.anchoring {
        Anchoring::ReplayAnchored => {
            for (t, &(soc, i_prev)) in scenario.anchors.iter().enumerate() {
                let (_, sol) = lower_solve(scenario, theta, soc, i_prev, t)?;
                states.push((soc, i_prev));
                u0.push(sol.first_control()[0]);
            }
        }
        Anchoring::FreeRolling => {
            let mut state = EcmState {
                soc: scenario.z0.0,
                i_prev: scenario.z0.1,
            };
            for t in 0..t_len {
                let (_, sol) = lower_solve(scenario, theta, state.soc, state.i_prev, t)?;
                let u = sol.first_control()[0];
                states.push((state.soc, state.i_prev));
                u0.push(u);
                state = step_soc(&state, u, &scenario.rint, scenario.dt_ctrl);
            }
        }
    }
    Ok(Rollout { states, u0 })
}

/// Squared mismatch Σ_t ‖u*₀(θ; z_t) − u_adv[t]‖² between the controller's
/// first controls and the recorded sequence.
pub fn bilevel_loss(theta: &ThetaParams, u_adv: &[f64], scenario: &FitScenario) -> Result<f64> {
    theta.validate()?;
    scenario.validate(u_adv.len())?;
    let roll = roll_states(scenario, theta, u_adv.len())?;
    Ok(loss_of(&roll.u0, u_adv))
}

fn loss_of(u0: &[f64], u_adv: &[f64]) -> f64 {
    u0.iter()
        .zip(u_adv)
        .map(|(u, a)| (u - a) * (u - a))
        .sum()
}

/// First-control sensitivities of one solved problem, via the implicit
/// function theorem on the active-set KKT system. The θ direction treats
/// the terminal weight as tied to q, matching the problem builders. `None`
/// means strict complementarity fails to hold with enough margin for the
/// frozen-active-set derivative to be trusted.
#[derive(Debug, Clone)]
pub struct ControlSensitivity {
    pub du_dq: f64,
    pub du_dr: f64,
    /// ∂u₀/∂x₀ (length state_dim), present when requested.
    pub du_dx0: Option<DVector<f64>>,
}

pub fn control_sensitivity(
    problem: &MpcProblem,
    solution: &MpcSolution,
    want_state: bool,
) -> Result<Option<ControlSensitivity>> {
    problem.validate()?;
    if problem.control_dim != 1 {
        return Err(Error::BadInput(
            "control sensitivities are defined for scalar controls".into(),
        ));
    }
    if problem.slack_weight.is_some() {
        return Err(Error::BadInput(
            "softened problems are not differentiated; solve the hard problem".into(),
        ));
    }
    let cond = condense(problem);
    let u = solution.stacked_controls();
    let n_u = u.len();

    // Classify rows and require strict complementarity margins: a row must
    // either carry a clear multiplier at a tight value, or keep clear
    // slack with a vanishing multiplier. Anything in between means a
    // 1e-8-size perturbation could flip the active set.
    let lam_ref = solution
        .multipliers
        .iter()
        .fold(1.0_f64, |m, l| m.max(l.abs()));
    let mut active: Vec<usize> = Vec::new();
    for (i, def) in problem.constraints.iter().enumerate() {
        let x_k = &cond.t_mats[def.stage] * &u + &cond.t_offs[def.stage];
        let value = constraint_value(def, &x_k, &u);
        let vref = match &def.form {
            ConstraintForm::Affine { rhs, .. } | ConstraintForm::Smooth { rhs, .. } => {
                rhs.abs().max(1.0)
            }
        };
        if solution.multipliers[i] > 1e-7 * lam_ref {
            if value.abs() > 1e-6 * vref {
                return Ok(None);
            }
            active.push(i);
        } else if value > -1e-8 * vref {
            return Ok(None);
        }
    }
    let na = active.len();
    if na > n_u {
        return Ok(None);
    }

    // Hessian of the Lagrangian over u: cost part plus curvature of the
    // active smooth rows.
    let (h0, g0, _) = condensed_cost(problem, &cond);
    let mut w_mat = h0.clone();
    for &i in &active {
        let def = &problem.constraints[i];
        if let ConstraintForm::Smooth { terms, .. } = &def.form {
            let t_k = &cond.t_mats[def.stage];
            let x_k = t_k * &u + &cond.t_offs[def.stage];
            for term in terms {
                let y = term.weights.dot(&x_k);
                let curv = solution.multipliers[i] * term.poly.deriv2(y);
                if curv == 0.0 {
                    continue;
                }
                let row = (term.weights.transpose() * t_k).transpose();
                for a in 0..n_u {
                    for b in 0..n_u {
                        w_mat[(a, b)] += curv * row[a] * row[b];
                    }
                }
            }
        }
    }

    // Bordered system [W J_Aᵀ; J_A 0].
    let dim = n_u + na;
    let mut kkt = DMatrix::<f64>::zeros(dim, dim);
    kkt.view_mut((0, 0), (n_u, n_u)).copy_from(&w_mat);
    for (row, &ci) in active.iter().enumerate() {
        let (j_row, _) = linearize_constraint(&problem.constraints[ci], &cond, &u);
        for a in 0..n_u {
            kkt[(n_u + row, a)] = j_row[a];
            kkt[(a, n_u + row)] = j_row[a];
        }
    }
    let lu = kkt.full_piv_lu();

    // θ directions: the condensed cost is linear in (q tied with
    // q_terminal) and in r, so unit bumps give exact derivatives.
    let solve_theta = |bump: &dyn Fn(&mut MpcProblem)| -> Option<f64> {
        let mut pb = problem.clone();
        bump(&mut pb);
        let (hb, gb, _) = condensed_cost(&pb, &cond);
        let dh = hb - &h0;
        let dg = gb - &g0;
        let mut rhs = DVector::<f64>::zeros(dim);
        let top = -(&dh * &u + dg);
        for a in 0..n_u {
            rhs[a] = top[a];
        }
        lu.solve(&rhs).map(|s| s[0])
    };
    let du_dq = match solve_theta(&|p: &mut MpcProblem| {
        p.cost.q += 1.0;
        p.cost.q_terminal += 1.0;
    }) {
        Some(v) => v,
        None => return Ok(None),
    };
    let du_dr = match solve_theta(&|p: &mut MpcProblem| {
        p.cost.r += 1.0;
    }) {
        Some(v) => v,
        None => return Ok(None),
    };

    let du_dx0 = if want_state {
        let n_x = problem.state_dim;
        let mut d = DVector::<f64>::zeros(n_x);
        // wᵀΦ_k per stage, for the cost part of ∂g/∂x₀.
        for m in 0..n_x {
            let mut rhs = DVector::<f64>::zeros(dim);
            for k in 0..=problem.horizon {
                let weight = if k == problem.horizon {
                    problem.cost.q_terminal
                } else {
                    problem.cost.q
                };
                if weight == 0.0 {
                    continue;
                }
                let row = problem.cost.w_track.transpose() * &cond.t_mats[k];
                let wphi = (problem.cost.w_track.transpose() * &cond.phi[k])[m];
                for a in 0..n_u {
                    rhs[a] -= 2.0 * weight * row[a] * wphi;
                }
            }
            for (a_idx, &ci) in active.iter().enumerate() {
                let def = &problem.constraints[ci];
                let t_k = &cond.t_mats[def.stage];
                let phi_k = &cond.phi[def.stage];
                let x_k = t_k * &u + &cond.t_offs[def.stage];
                let dval = match &def.form {
                    ConstraintForm::Affine { x_coeff, .. } => {
                        (x_coeff.transpose() * phi_k)[m]
                    }
                    ConstraintForm::Smooth { terms, x_lin, .. } => {
                        let mut v = (x_lin.transpose() * phi_k)[m];
                        for term in terms {
                            let y = term.weights.dot(&x_k);
                            let wphi = (term.weights.transpose() * phi_k)[m];
                            v += term.poly.deriv1(y) * wphi;
                            // Cross-curvature of the Lagrangian gradient.
                            let curv = solution.multipliers[ci] * term.poly.deriv2(y) * wphi;
                            if curv != 0.0 {
                                let row = (term.weights.transpose() * t_k).transpose();
                                for a in 0..n_u {
                                    rhs[a] -= curv * row[a];
                                }
                            }
                        }
                        v
                    }
                };
                rhs[n_u + a_idx] = -dval;
            }
            match lu.solve(&rhs) {
                Some(s) => d[m] = s[0],
                None => return Ok(None),
            }
        }
        Some(d)
    } else {
        None
    };

    Ok(Some(ControlSensitivity {
        du_dq,
        du_dr,
        du_dx0,
    }))
}

/// Central finite differences of the first control of one anchored step,
/// used when the implicit derivative is not trustworthy.
fn fd_first_control(
    scenario: &FitScenario,
    theta: &ThetaParams,
    soc: f64,
    i_prev: f64,
    step: usize,
) -> Result<(f64, f64)> {
    let h_rel = 1e-6;
    let mut out = [0.0_f64; 2];
    for (j, slot) in out.iter_mut().enumerate() {
        let base = if j == 0 { theta.q } else { theta.r };
        let h = h_rel * base.abs().max(1.0);
        let shift = |v: f64| -> ThetaParams {
            if j == 0 {
                ThetaParams::new(theta.q + v, theta.r)
            } else {
                ThetaParams::new(theta.q, theta.r + v)
            }
        };
        let plus = lower_solve(scenario, &shift(h), soc, i_prev, step)?.1.first_control()[0];
        let tm = shift(-h);
        *slot = if tm.validate().is_ok() {
            let minus = lower_solve(scenario, &tm, soc, i_prev, step)?.1.first_control()[0];
            (plus - minus) / (2.0 * h)
        } else {
            let mid = lower_solve(scenario, theta, soc, i_prev, step)?.1.first_control()[0];
            (plus - mid) / h
        };
    }
    Ok((out[0], out[1]))
}

/// Gradient evaluation detail: the gradient, the loss and controls it was
/// computed at, and which steps needed the finite-difference fallback.
#[derive(Debug, Clone)]
pub struct GradientDetail {
    pub grad: (f64, f64),
    pub loss: f64,
    pub u0: Vec<f64>,
    pub fallback_steps: Vec<usize>,
}

/// Loss gradient via per-step implicit differentiation; falls back to
/// finite differences per step (replay anchoring) or for the whole loss
/// (free rolling, where steps couple) when an active set is unstable.
pub fn gradient_detail(
    theta: &ThetaParams,
    u_adv: &[f64],
    scenario: &FitScenario,
) -> Result<GradientDetail> {
    theta.validate()?;
    scenario.validate(u_adv.len())?;
    match scenario.anchoring {
        Anchoring::ReplayAnchored => {
            let mut grad = (0.0, 0.0);
            let mut loss = 0.0;
            let mut u0 = Vec::with_capacity(u_adv.len());
            let mut fallback_steps = Vec::new();
            for (t, &(soc, i_prev)) in scenario.anchors.iter().enumerate() {
                let (problem, sol) = lower_solve(scenario, theta, soc, i_prev, t)?;
                let u = sol.first_control()[0];
                let e = u - u_adv[t];
                loss += e * e;
                u0.push(u);
                let (dq, dr) = match control_sensitivity(&problem, &sol, false)? {
                    Some(s) => (s.du_dq, s.du_dr),
                    None => {
                        fallback_steps.push(t);
                        fd_first_control(scenario, theta, soc, i_prev, t)?
                    }
                };
                grad.0 += 2.0 * e * dq;
                grad.1 += 2.0 * e * dr;
            }
            Ok(GradientDetail {
                grad,
                loss,
                u0,
                fallback_steps,
            })
        }
        Anchoring::FreeRolling => {
            let t_len = u_adv.len();
            let mut state = EcmState {
                soc: scenario.z0.0,
                i_prev: scenario.z0.1,
            };
            // z_t sensitivity to θ, chained through the rollout.
            let mut z_sens = DMatrix::<f64>::zeros(2, 2);
            let mut grad = (0.0, 0.0);
            let mut loss = 0.0;
            let mut u0 = Vec::with_capacity(t_len);
            let mut fallback_steps = Vec::new();
            for t in 0..t_len {
                let (problem, sol) = lower_solve(scenario, theta, state.soc, state.i_prev, t)?;
                let u = sol.first_control()[0];
                let e = u - u_adv[t];
                loss += e * e;
                u0.push(u);
                let sens = match control_sensitivity(&problem, &sol, true)? {
                    Some(s) => s,
                    None => {
                        // Coupled steps: one unstable set invalidates the
                        // chain, so the whole gradient falls back.
                        fallback_steps.push(t);
                        let g = fd_gradient(theta, u_adv, scenario, 1e-6)?;
                        let roll = roll_states(scenario, theta, t_len)?;
                        return Ok(GradientDetail {
                            grad: g,
                            loss: loss_of(&roll.u0, u_adv),
                            u0: roll.u0,
                            fallback_steps,
                        });
                    }
                };
                let du_dz = sens.du_dx0.expect("state sensitivities requested");
                // Total derivative of u₀ at step t: partial + chain.
                let mut du_total = DVector::<f64>::from_vec(vec![sens.du_dq, sens.du_dr]);
                for j in 0..2 {
                    du_total[j] += du_dz[0] * z_sens[(0, j)] + du_dz[1] * z_sens[(1, j)];
                }
                grad.0 += 2.0 * e * du_total[0];
                grad.1 += 2.0 * e * du_total[1];
                // z_{t+1} = A z_t + B u₀ with the builder's dynamics.
                let a = &problem.dynamics[0].a;
                let b = &problem.dynamics[0].b;
                let mut z_next = DMatrix::<f64>::zeros(2, 2);
                for j in 0..2 {
                    for i in 0..2 {
                        z_next[(i, j)] =
                            a[(i, 0)] * z_sens[(0, j)] + a[(i, 1)] * z_sens[(1, j)]
                                + b[(i, 0)] * du_total[j];
                    }
                }
                z_sens = z_next;
                state = step_soc(&state, u, &scenario.rint, scenario.dt_ctrl);
            }
            Ok(GradientDetail {
                grad,
                loss,
                u0,
                fallback_steps,
            })
        }
    }
}

/// Loss gradient (dL/dq, dL/dr); see [`gradient_detail`] for the variant
/// that also reports fallback bookkeeping.
pub fn pdp_gradient(
    theta: &ThetaParams,
    u_adv: &[f64],
    scenario: &FitScenario,
) -> Result<(f64, f64)> {
    Ok(gradient_detail(theta, u_adv, scenario)?.grad)
}

/// Central finite differences of the bi-level loss; `h_rel` is the
/// relative parameter step, accepted in [1e-8, 1e-3].
pub fn fd_gradient(
    theta: &ThetaParams,
    u_adv: &[f64],
    scenario: &FitScenario,
    h_rel: f64,
) -> Result<(f64, f64)> {
    if !(1e-8..=1e-3).contains(&h_rel) {
        return Err(Error::BadInput(format!(
            "relative step must lie in [1e-8, 1e-3], got {h_rel}"
        )));
    }
    theta.validate()?;
    scenario.validate(u_adv.len())?;
    let mut center: Option<f64> = None;
    let mut out = [0.0_f64; 2];
    for (j, slot) in out.iter_mut().enumerate() {
        let base = if j == 0 { theta.q } else { theta.r };
        let h = h_rel * base.abs().max(1.0);
        let shift = |v: f64| -> ThetaParams {
            if j == 0 {
                ThetaParams::new(theta.q + v, theta.r)
            } else {
                ThetaParams::new(theta.q, theta.r + v)
            }
        };
        let plus = bilevel_loss(&shift(h), u_adv, scenario)?;
        let minus_theta = shift(-h);
        *slot = if minus_theta.validate().is_ok() {
            (plus - bilevel_loss(&minus_theta, u_adv, scenario)?) / (2.0 * h)
        } else {
            // One-sided at the boundary of the parameter domain.
            let c = match center {
                Some(c) => c,
                None => {
                    let c = bilevel_loss(theta, u_adv, scenario)?;
                    center = Some(c);
                    c
                }
            };
            (plus - c) / h
        };
    }
    Ok((out[0], out[1]))
}

/// Descent schedule for [`fit_theta`].
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct FitSchedule {
    /// Base learning rate α.
    pub alpha: f64,
    pub max_iters: usize,
    /// Stop once loss or gradient norm falls below this.
    pub tol: f64,
}

impl Default for FitSchedule {
    fn default() -> Self {
        FitSchedule {
            alpha: 0.1,
            max_iters: 500,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitStatus {
    Converged,
    MaxIter,
    Stalled,
}

/// A step whose sensitivity came from the finite-difference fallback.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct FallbackEvent {
    pub iteration: usize,
    pub step: usize,
}

/// Fitting artifacts: iterate/loss/gradient histories (aligned per outer
/// iteration, with the final accepted iterate appended), termination
/// status, final per-step control errors, and fallback bookkeeping.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub theta_history: Vec<ThetaParams>,
    pub loss_history: Vec<f64>,
    pub grad_norm_history: Vec<f64>,
    pub status: FitStatus,
    pub final_control_errors: Vec<f64>,
    pub fallback_events: Vec<FallbackEvent>,
}

impl FitReport {
    pub fn final_loss(&self) -> f64 {
        self.loss_history.last().copied().unwrap_or(f64::NAN)
    }

    /// CSV of (iteration, q, r, loss, grad_norm); the final row carries an
    /// empty gradient when none was evaluated there.
    pub fn history_csv(&self) -> String {
        let mut s = String::from("iteration,q,r,loss,grad_norm\n");
        for i in 0..self.theta_history.len() {
            let g = self
                .grad_norm_history
                .get(i)
                .map(|v| v.to_string())
                .unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                i, self.theta_history[i].q, self.theta_history[i].r, self.loss_history[i], g
            ));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "fit: {} iterations, status {:?}\n",
            self.grad_norm_history.len(),
            self.status
        ));
        if let (Some(t), Some(l)) = (self.theta_history.last(), self.loss_history.last()) {
            s.push_str(&format!(
                "final theta: q = {:.6}, r = {:.6} (ratio {:.4}), loss = {:.3e}\n",
                t.q,
                t.r,
                t.ratio(),
                l
            ));
        }
        if !self.fallback_events.is_empty() {
            s.push_str(&format!(
                "finite-difference fallbacks: {}\n",
                self.fallback_events.len()
            ));
        }
        s
    }
}

const THETA_FLOOR: f64 = 1e-8;
const MAX_HALVINGS: usize = 20;

fn project(theta: ThetaParams) -> ThetaParams {
    ThetaParams {
        q: theta.q.max(THETA_FLOOR),
        r: theta.r.max(THETA_FLOOR),
    }
}

/// Projected gradient descent with backtracking on the q + r = 1 slice.
/// Accepted steps strictly decrease the loss; trial evaluations that fail
/// in the lower level count as rejected trials rather than hard errors.
pub fn fit_theta(
    u_adv: &[f64],
    theta0: &ThetaParams,
    schedule: &FitSchedule,
    scenario: &FitScenario,
) -> Result<(ThetaParams, FitReport)> {
    theta0.validate()?;
    scenario.validate(u_adv.len())?;
    if schedule.alpha < 0.0 || !schedule.alpha.is_finite() {
        return Err(Error::BadInput(format!(
            "learning rate must be finite and >= 0, got {}",
            schedule.alpha
        )));
    }
    if !(schedule.tol > 0.0) {
        return Err(Error::BadInput(format!(
            "tolerance must be > 0, got {}",
            schedule.tol
        )));
    }

    let mut theta = theta0.normalized();
    let detail = gradient_detail(&theta, u_adv, scenario)?;
    let mut loss = detail.loss;
    let mut u0 = detail.u0.clone();
    let mut report = FitReport {
        theta_history: vec![theta],
        loss_history: vec![loss],
        grad_norm_history: Vec::new(),
        status: FitStatus::MaxIter,
        final_control_errors: Vec::new(),
        fallback_events: Vec::new(),
    };

    if schedule.alpha == 0.0 {
        report.status = FitStatus::Stalled;
        report.final_control_errors = control_errors(&u0, u_adv);
        return Ok((theta, report));
    }

    let mut alpha = schedule.alpha;
    let mut pending = Some(detail);
    for iteration in 0..schedule.max_iters {
        let detail = match pending.take() {
            Some(d) => d,
            None => gradient_detail(&theta, u_adv, scenario)?,
        };
        for &step in &detail.fallback_steps {
            report.fallback_events.push(FallbackEvent { iteration, step });
        }
        let (gq, gr) = detail.grad;
        let grad_norm = (gq * gq + gr * gr).sqrt();
        report.grad_norm_history.push(grad_norm);
        if loss < schedule.tol || grad_norm < schedule.tol {
            report.status = FitStatus::Converged;
            break;
        }

        let mut accepted = false;
        let mut step_size = alpha;
        for halving in 0..=MAX_HALVINGS {
            let trial = project(ThetaParams::new(
                theta.q - step_size * gq,
                theta.r - step_size * gr,
            ))
            .normalized();
            match roll_states(scenario, &trial, u_adv.len()) {
                Ok(roll) => {
                    let trial_loss = loss_of(&roll.u0, u_adv);
                    if trial_loss < loss {
                        theta = trial;
                        loss = trial_loss;
                        u0 = roll.u0;
                        report.theta_history.push(theta);
                        report.loss_history.push(loss);
                        alpha = if halving == 0 {
                            (alpha * 2.0).min(1e8)
                        } else {
                            step_size
                        };
                        accepted = true;
                        break;
                    }
                }
                Err(Error::LowerLevel { .. }) => {}
                Err(e) => return Err(e),
            }
            step_size *= 0.5;
        }
        if !accepted {
            report.status = FitStatus::Stalled;
            break;
        }
    }
    report.final_control_errors = control_errors(&u0, u_adv);
    Ok((theta, report))
}

fn control_errors(u0: &[f64], u_adv: &[f64]) -> Vec<f64> {
    u0.iter().zip(u_adv).map(|(u, a)| (u - a).abs()).collect()
}

/// Deterministic scenario generator shared by tests and the gradient
/// verification command: a mildly randomized circuit model, anchors well
/// inside the operating window, and a mix that leaves the current bound
/// active on some steps.
pub fn sample_scenario(seed: u64) -> (FitScenario, Vec<f64>, ThetaParams) {
    // splitmix64: tiny, seedable, reproducible across platforms.
    let mut s = seed;
    let mut next = move || -> f64 {
        s = s.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = s;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64
    };
    let ocv = crate::ocv::Polynomial::new(vec![
        3.0 + 0.2 * next(),
        0.6 + 0.3 * next(),
        0.1 * next(),
    ]);
    let rint = RintParams {
        eta: 1.0,
        q_c: 1.3e5 + 4e4 * next(),
        r_0: 1e-3 + 2e-3 * next(),
        ocv,
        area: 1.0,
    };
    let limits = Limits {
        soc_max: 0.85,
        i_max: 60.0,
        v_max: 4.2 + 0.1 * next(),
        soc_d: 0.8,
    };
    let horizon = 5 + (next() * 5.0) as usize;
    let dt_ctrl = 5.0 + 15.0 * next();
    let t_len = 4 + (next() * 5.0) as usize;
    let mut anchors = Vec::with_capacity(t_len);
    for _ in 0..t_len {
        let soc = 0.3 + 0.45 * next();
        let i_prev = -10.0 + 40.0 * next();
        anchors.push((soc, i_prev));
    }
    let u_adv: Vec<f64> = (0..t_len).map(|_| -5.0 + 10.0 * next()).collect();
    let theta = ThetaParams::new(0.2 + 0.6 * next(), 0.0).normalized_with_r();
    let z0 = anchors[0];
    (
        FitScenario {
            rint,
            limits,
            horizon,
            dt_ctrl,
            anchoring: Anchoring::ReplayAnchored,
            anchors,
            z0,
        },
        u_adv,
        theta,
    )
}

impl ThetaParams {
    /// Interprets q as the simplex coordinate and fills r = 1 − q.
    fn normalized_with_r(mut self) -> Self {
        self.q = self.q.clamp(0.05, 0.95);
        self.r = 1.0 - self.q;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpc::problem::{QuadCost, StageDynamics};
    use approx::assert_relative_eq;

    /// Unconstrained one-step problem: cost q·(x₀ + b·u − x*)² + r·u².
    fn one_step(q: f64, r: f64, b: f64, x0: f64, target: f64) -> MpcProblem {
        MpcProblem {
            horizon: 1,
            state_dim: 1,
            control_dim: 1,
            dynamics: vec![StageDynamics {
                a: DMatrix::from_element(1, 1, 1.0),
                b: DMatrix::from_element(1, 1, b),
                c: DVector::zeros(1),
            }],
            cost: QuadCost {
                w_track: DVector::from_element(1, 1.0),
                target,
                q,
                q_terminal: q,
                r,
                control_scale: 1.0,
                reg: 0.0,
            },
            constraints: vec![],
            x0: DVector::from_element(1, x0),
            slack_weight: None,
        }
    }

    #[test]
    fn one_step_sensitivities_match_the_closed_form() {
        let (q, r, b, x0, target) = (2.0, 0.5, 0.7, 0.1, 0.9);
        let p = one_step(q, r, b, x0, target);
        let sol = solve(&p).unwrap();
        let gap = target - x0;
        assert_relative_eq!(
            sol.first_control()[0],
            q * b * gap / (q * b * b + r),
            max_relative = 1e-10
        );
        let sens = control_sensitivity(&p, &sol, true).unwrap().unwrap();
        let denom = (q * b * b + r).powi(2);
        assert_relative_eq!(sens.du_dq, b * gap * r / denom, max_relative = 1e-8);
        assert_relative_eq!(sens.du_dr, -q * b * gap / denom, max_relative = 1e-8);
        // ∂u/∂x₀ of the closed form is −qb/(qb² + r).
        let dx = sens.du_dx0.unwrap();
        assert_relative_eq!(dx[0], -q * b / (q * b * b + r), max_relative = 1e-8);
    }

    fn synthetic_round_trip(theta_true: ThetaParams, seed: u64) -> (FitScenario, Vec<f64>) {
        let (mut scenario, _, _) = sample_scenario(seed);
        scenario.anchoring = Anchoring::FreeRolling;
        scenario.z0 = (0.35, 0.0);
        let roll = roll_states(&scenario, &theta_true, 6).unwrap();
        // Fit against the recorded rollout, replay-anchored on its states.
        scenario.anchors = roll.states.clone();
        scenario.anchoring = Anchoring::ReplayAnchored;
        (scenario, roll.u0)
    }

    #[test]
    fn loss_vanishes_at_the_generating_theta() {
        let theta = ThetaParams::new(2.0, 0.5);
        let (scenario, u_adv) = synthetic_round_trip(theta, 3);
        let loss = bilevel_loss(&theta, &u_adv, &scenario).unwrap();
        assert!(loss < 1e-12, "self-consistent loss was {loss}");
    }

    #[test]
    fn zero_tracking_weight_cannot_match_aggressive_controls() {
        let (scenario, u_adv) = synthetic_round_trip(ThetaParams::new(5.0, 0.1), 4);
        let loss = bilevel_loss(&ThetaParams::new(0.0, 1.0), &u_adv, &scenario).unwrap();
        assert!(loss > 1e-2, "pure effort penalty matched anyway: {loss}");
    }

    #[test]
    fn loss_is_invariant_under_positive_scaling_of_theta() {
        let (scenario, u_adv) = synthetic_round_trip(ThetaParams::new(2.0, 0.5), 5);
        let l1 = bilevel_loss(&ThetaParams::new(2.0, 0.5), &u_adv, &scenario).unwrap();
        let l10 = bilevel_loss(&ThetaParams::new(20.0, 5.0), &u_adv, &scenario).unwrap();
        assert!(
            (l1 - l10).abs() <= 1e-10 * (1.0 + l1.abs()),
            "loss moved under scaling: {l1} vs {l10}"
        );
    }

    #[test]
    fn implicit_gradient_matches_finite_differences_on_sampled_scenarios() {
        let mut compared = 0;
        for seed in 0..8_u64 {
            let (scenario, u_adv, theta) = sample_scenario(seed);
            let detail = gradient_detail(&theta, &u_adv, &scenario).unwrap();
            if !detail.fallback_steps.is_empty() {
                continue;
            }
            let fd = fd_gradient(&theta, &u_adv, &scenario, 1e-6).unwrap();
            let denom = fd.0.abs().max(fd.1.abs()).max(1e-6);
            assert!(
                (detail.grad.0 - fd.0).abs() <= 1e-4 * denom,
                "seed {seed}: dq {} vs fd {}",
                detail.grad.0,
                fd.0
            );
            assert!(
                (detail.grad.1 - fd.1).abs() <= 1e-4 * denom,
                "seed {seed}: dr {} vs fd {}",
                detail.grad.1,
                fd.1
            );
            compared += 1;
        }
        assert!(compared >= 5, "only {compared} scenarios were comparable");
    }

    #[test]
    fn free_rolling_gradient_matches_finite_differences() {
        let (mut scenario, u_adv, theta) = sample_scenario(11);
        scenario.anchoring = Anchoring::FreeRolling;
        scenario.z0 = (0.4, 0.0);
        let detail = gradient_detail(&theta, &u_adv, &scenario).unwrap();
        let fd = fd_gradient(&theta, &u_adv, &scenario, 1e-6).unwrap();
        let denom = fd.0.abs().max(fd.1.abs()).max(1e-6);
        assert!(
            detail.fallback_steps.is_empty(),
            "fallbacks {:?}",
            detail.fallback_steps
        );
        assert!(
            (detail.grad.0 - fd.0).abs() <= 1e-4 * denom
                && (detail.grad.1 - fd.1).abs() <= 1e-4 * denom,
            "pdp {:?} vs fd {:?}",
            detail.grad,
            fd
        );
    }

    #[test]
    fn gradient_norm_vanishes_at_the_generating_theta() {
        let theta = ThetaParams::new(2.0, 0.5).normalized();
        let (scenario, u_adv) = synthetic_round_trip(theta, 6);
        let (gq, gr) = pdp_gradient(&theta, &u_adv, &scenario).unwrap();
        let norm = (gq * gq + gr * gr).sqrt();
        assert!(norm < 1e-6, "gradient at the optimum was {norm}");
    }

    #[test]
    fn fd_step_size_is_validated_and_sign_consistent_across_the_range() {
        let (scenario, u_adv, theta) = sample_scenario(7);
        assert!(fd_gradient(&theta, &u_adv, &scenario, 1e-9).is_err());
        assert!(fd_gradient(&theta, &u_adv, &scenario, 1e-2).is_err());
        let g_small = fd_gradient(&theta, &u_adv, &scenario, 1e-7).unwrap();
        let g_large = fd_gradient(&theta, &u_adv, &scenario, 1e-3).unwrap();
        assert_eq!(g_small.0.signum(), g_large.0.signum());
        assert_eq!(g_small.1.signum(), g_large.1.signum());
    }

    #[test]
    fn fit_recovers_the_generating_weight_ratio() {
        let theta_true = ThetaParams::new(2.0, 0.5);
        let (scenario, u_adv) = synthetic_round_trip(theta_true, 9);
        let (theta_star, report) = fit_theta(
            &u_adv,
            &ThetaParams::new(1.0, 1.0),
            &FitSchedule::default(),
            &scenario,
        )
        .unwrap();
        assert!(
            report.final_loss() < 1e-6,
            "loss stayed at {}",
            report.final_loss()
        );
        assert_relative_eq!(theta_star.ratio(), theta_true.ratio(), max_relative = 0.01);
    }

    #[test]
    fn fit_from_the_true_theta_converges_without_stepping() {
        let theta_true = ThetaParams::new(2.0, 0.5);
        let (scenario, u_adv) = synthetic_round_trip(theta_true, 10);
        let (theta_star, report) = fit_theta(
            &u_adv,
            &theta_true,
            &FitSchedule::default(),
            &scenario,
        )
        .unwrap();
        assert_eq!(report.status, FitStatus::Converged);
        assert!(report.grad_norm_history.len() <= 1);
        assert_relative_eq!(theta_star.ratio(), theta_true.ratio(), max_relative = 1e-9);
    }

    #[test]
    fn zero_learning_rate_stalls_immediately() {
        let (scenario, u_adv, theta) = sample_scenario(12);
        let schedule = FitSchedule {
            alpha: 0.0,
            ..FitSchedule::default()
        };
        let (_, report) = fit_theta(&u_adv, &theta, &schedule, &scenario).unwrap();
        assert_eq!(report.status, FitStatus::Stalled);
        assert!(report.grad_norm_history.is_empty());
    }

    #[test]
    fn accepted_loss_history_is_strictly_decreasing() {
        let theta_true = ThetaParams::new(3.0, 1.0);
        let (scenario, u_adv) = synthetic_round_trip(theta_true, 13);
        let (_, report) = fit_theta(
            &u_adv,
            &ThetaParams::new(1.0, 2.0),
            &FitSchedule {
                max_iters: 40,
                ..FitSchedule::default()
            },
            &scenario,
        )
        .unwrap();
        for w in report.loss_history.windows(2) {
            assert!(w[1] < w[0], "non-decreasing accepted step: {w:?}");
        }
        assert!(report.history_csv().starts_with("iteration,q,r,loss,grad_norm"));
    }

    #[test]
    fn pinned_controls_give_zero_gradient_both_ways() {
        // A tight current bound with a long control period saturates the
        // first control for every nearby θ: du/dθ = 0, so both gradient
        // paths must agree at zero.
        let (mut scenario, _, _) = sample_scenario(20);
        let theta = ThetaParams::new(1.0, 1e-4);
        scenario.dt_ctrl = 60.0;
        scenario.anchors = vec![(0.30, 0.0); 3];
        scenario.horizon = 3;
        let u_adv = vec![0.0; 3];
        let fd = fd_gradient(&theta, &u_adv, &scenario, 1e-5).unwrap();
        let detail = gradient_detail(&theta, &u_adv, &scenario).unwrap();
        assert!(fd.0.abs() < 1e-6 && fd.1.abs() < 1e-6, "fd {fd:?}");
        assert!(
            detail.grad.0.abs() < 1e-6 && detail.grad.1.abs() < 1e-6,
            "pdp {:?}",
            detail.grad
        );
    }

    #[test]
    fn replay_anchoring_requires_matching_anchor_count() {
        let (mut scenario, u_adv, theta) = sample_scenario(14);
        scenario.anchors.pop();
        assert!(bilevel_loss(&theta, &u_adv, &scenario).is_err());
    }
}
