//! Finite-horizon MPC problem description and its single-shooting
//! condensation into a dense QP over the stacked control vector.

use crate::error::{Error, Result};
use crate::ocv::Polynomial;
use nalgebra::{DMatrix, DVector};

/// One prediction step of affine dynamics `x⁺ = A·x + B·u + c`.
#[derive(Debug, Clone)]
pub struct StageDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
}

/// Quadratic tracking cost over a scalar output `wᵀx`:
///
///   Σ_{k=0}^{N−1} [ q·(wᵀx_k − target)² + r·(u_k/control_scale)² ]
///   + q_terminal·(wᵀx_N − target)² + reg·‖u‖²
#[derive(Debug, Clone)]
pub struct QuadCost {
    /// Output weights over the state (the tracked scalar is `wᵀx`).
    pub w_track: DVector<f64>,
    /// Desired tracked value.
    pub target: f64,
    /// Stage tracking weight q ≥ 0.
    pub q: f64,
    /// Terminal tracking weight (the builders use q; tests may override to
    /// a Riccati value).
    pub q_terminal: f64,
    /// Control effort weight r ≥ 0.
    pub r: f64,
    /// Normalization of the control inside the effort term.
    pub control_scale: f64,
    /// Tie-breaking regularization, added on top of r (kept at 0 unless
    /// r = 0, where a strictly convex 1e-10 keeps the argmin unique).
    pub reg: f64,
}

impl QuadCost {
    /// Effective quadratic coefficient on each control entry.
    pub fn control_coeff(&self) -> f64 {
        self.r / (self.control_scale * self.control_scale) + self.reg
    }
}

/// Whether violating a constraint breaks cover or merely the attack goal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    /// Defender-visible operating limit; never softened.
    Stealth,
    /// Attacker objective constraint; soft-capable.
    Adversarial,
}

/// A smooth scalar contribution `poly(weightsᵀ·x_k)` inside a constraint.
#[derive(Debug, Clone)]
pub struct SmoothTerm {
    pub weights: DVector<f64>,
    pub poly: Polynomial,
}

/// Row shape of one inequality, normalized to `value ≤ 0`.
#[derive(Debug, Clone)]
pub enum ConstraintForm {
    /// x_coeffᵀ·x_k + u_coeffᵀ·u_stacked − rhs ≤ 0
    Affine {
        x_coeff: DVector<f64>,
        u_coeff: DVector<f64>,
        rhs: f64,
    },
    /// Σ_j poly_j(w_jᵀ·x_k) + x_linᵀ·x_k + u_coeffᵀ·u_stacked − rhs ≤ 0
    Smooth {
        terms: Vec<SmoothTerm>,
        x_lin: DVector<f64>,
        u_coeff: DVector<f64>,
        rhs: f64,
    },
}

/// One inequality constraint anchored at prediction stage `stage`.
#[derive(Debug, Clone)]
pub struct ConstraintDef {
    pub kind: ConstraintKind,
    /// Index of the predicted state the x-part applies to (0 = measured).
    pub stage: usize,
    pub form: ConstraintForm,
    /// Human-readable tag used in debug dumps and violation reports.
    pub label: String,
}

/// Finite-horizon problem over stacked controls.
#[derive(Debug, Clone)]
pub struct MpcProblem {
    /// Horizon length N ≥ 1.
    pub horizon: usize,
    pub state_dim: usize,
    pub control_dim: usize,
    /// Per-stage dynamics, length N.
    pub dynamics: Vec<StageDynamics>,
    pub cost: QuadCost,
    pub constraints: Vec<ConstraintDef>,
    /// Measured initial state x₀ (any held-input augmentation included).
    pub x0: DVector<f64>,
    /// Quadratic slack penalty installed by `soften`; `None` = hard.
    pub slack_weight: Option<f64>,
}

impl MpcProblem {
    /// Structural validation of the invariants the solver relies on.
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::BadInput("horizon must be at least 1".into()));
        }
        if self.dynamics.len() != self.horizon {
            return Err(Error::BadInput(format!(
                "{} dynamics stages for horizon {}",
                self.dynamics.len(),
                self.horizon
            )));
        }
        if self.x0.len() != self.state_dim {
            return Err(Error::BadInput(format!(
                "x0 has {} entries, state_dim is {}",
                self.x0.len(),
                self.state_dim
            )));
        }
        for (k, d) in self.dynamics.iter().enumerate() {
            if d.a.nrows() != self.state_dim
                || d.a.ncols() != self.state_dim
                || d.b.nrows() != self.state_dim
                || d.b.ncols() != self.control_dim
                || d.c.len() != self.state_dim
            {
                return Err(Error::BadInput(format!("stage {k} dynamics shape mismatch")));
            }
        }
        if self.cost.q < 0.0 || self.cost.r < 0.0 || self.cost.q_terminal < 0.0 {
            return Err(Error::BadInput("cost weights must be nonnegative".into()));
        }
        if self.cost.q + self.cost.r <= 0.0 {
            return Err(Error::BadInput("cost requires q + r > 0".into()));
        }
        if !(self.cost.control_scale > 0.0) {
            return Err(Error::BadInput("control_scale must be positive".into()));
        }
        if self.cost.w_track.len() != self.state_dim {
            return Err(Error::BadInput("w_track length mismatch".into()));
        }
        let nu = self.horizon * self.control_dim;
        for c in &self.constraints {
            if c.stage > self.horizon {
                return Err(Error::BadInput(format!(
                    "constraint '{}' anchored past the horizon",
                    c.label
                )));
            }
            let (xl, ul) = match &c.form {
                ConstraintForm::Affine { x_coeff, u_coeff, .. } => (x_coeff.len(), u_coeff.len()),
                ConstraintForm::Smooth {
                    x_lin, u_coeff, terms, ..
                } => {
                    for t in terms {
                        if t.weights.len() != self.state_dim {
                            return Err(Error::BadInput(format!(
                                "constraint '{}' smooth term weight length mismatch",
                                c.label
                            )));
                        }
                    }
                    (x_lin.len(), u_coeff.len())
                }
            };
            if xl != self.state_dim || ul != nu {
                return Err(Error::BadInput(format!(
                    "constraint '{}' coefficient shape mismatch",
                    c.label
                )));
            }
        }
        if let Some(w) = self.slack_weight {
            if !(w > 0.0) {
                return Err(Error::BadInput("slack_weight must be positive".into()));
            }
        }
        Ok(())
    }

    /// Number of soft-capable (adversarial) constraints.
    pub fn adversarial_count(&self) -> usize {
        self.constraints
            .iter()
            .filter(|c| c.kind == ConstraintKind::Adversarial)
            .count()
    }
}

/// Condensed prediction maps: `x_k = t_mats[k]·u + t_offs[k]` with state
/// sensitivities `phi[k] = ∂x_k/∂x₀`, for k = 0..=N.
#[derive(Debug, Clone)]
pub struct Condensed {
    pub t_mats: Vec<DMatrix<f64>>,
    pub t_offs: Vec<DVector<f64>>,
    pub phi: Vec<DMatrix<f64>>,
}

/// Eliminates the states through the dynamics recursion.
pub fn condense(p: &MpcProblem) -> Condensed {
    let n = p.state_dim;
    let nu = p.horizon * p.control_dim;
    let mut t_mats = Vec::with_capacity(p.horizon + 1);
    let mut t_offs = Vec::with_capacity(p.horizon + 1);
    let mut phi = Vec::with_capacity(p.horizon + 1);
    t_mats.push(DMatrix::<f64>::zeros(n, nu));
    t_offs.push(p.x0.clone());
    phi.push(DMatrix::<f64>::identity(n, n));
    for k in 0..p.horizon {
        let d = &p.dynamics[k];
        let mut t_next = &d.a * &t_mats[k];
        for i in 0..n {
            for j in 0..p.control_dim {
                t_next[(i, k * p.control_dim + j)] += d.b[(i, j)];
            }
        }
        t_mats.push(t_next);
        t_offs.push(&d.a * &t_offs[k] + &d.c);
        phi.push(&d.a * &phi[k]);
    }
    Condensed {
        t_mats,
        t_offs,
        phi,
    }
}

/// Quadratic cost over stacked controls: Hessian, gradient at u = 0, and
/// the constant term (so reported costs include the state-only parts).
pub fn condensed_cost(p: &MpcProblem, c: &Condensed) -> (DMatrix<f64>, DVector<f64>, f64) {
    let nu = p.horizon * p.control_dim;
    let mut h = DMatrix::<f64>::zeros(nu, nu);
    let mut g = DVector::<f64>::zeros(nu);
    let mut c0 = 0.0;
    for k in 0..=p.horizon {
        let weight = if k == p.horizon {
            p.cost.q_terminal
        } else {
            p.cost.q
        };
        if weight == 0.0 {
            continue;
        }
        // Tracked output y_k = wᵀ(T_k u + t_k); cost weight·(y_k − d)².
        let row = p.cost.w_track.transpose() * &c.t_mats[k];
        let off = p.cost.w_track.dot(&c.t_offs[k]) - p.cost.target;
        for a in 0..nu {
            if row[a] == 0.0 {
                continue;
            }
            for b in 0..nu {
                h[(a, b)] += 2.0 * weight * row[a] * row[b];
            }
        }
        for a in 0..nu {
            g[a] += 2.0 * weight * off * row[a];
        }
        c0 += weight * off * off;
    }
    let ru = p.cost.control_coeff();
    for a in 0..nu {
        h[(a, a)] += 2.0 * ru;
    }
    (h, g, c0)
}

/// Evaluates one constraint at explicit state/control values; negative or
/// zero means satisfied.
pub fn constraint_value(def: &ConstraintDef, x_k: &DVector<f64>, u: &DVector<f64>) -> f64 {
    match &def.form {
        ConstraintForm::Affine {
            x_coeff,
            u_coeff,
            rhs,
        } => x_coeff.dot(x_k) + u_coeff.dot(u) - rhs,
        ConstraintForm::Smooth {
            terms,
            x_lin,
            u_coeff,
            rhs,
        } => {
            let mut v = x_lin.dot(x_k) + u_coeff.dot(u) - rhs;
            for t in terms {
                v += t.poly.eval(t.weights.dot(x_k));
            }
            v
        }
    }
}

/// Linearizes one constraint about the stacked control point `u_lin`,
/// returning (row over u, rhs) of `row·u ≤ rhs` that is exact for affine
/// rows and first-order for smooth ones.
pub fn linearize_constraint(
    def: &ConstraintDef,
    cond: &Condensed,
    u_lin: &DVector<f64>,
) -> (DVector<f64>, f64) {
    let t_k = &cond.t_mats[def.stage];
    let t_off = &cond.t_offs[def.stage];
    match &def.form {
        ConstraintForm::Affine {
            x_coeff,
            u_coeff,
            rhs,
        } => {
            let row = (x_coeff.transpose() * t_k).transpose() + u_coeff;
            let rhs_u = rhs - x_coeff.dot(t_off);
            (row, rhs_u)
        }
        ConstraintForm::Smooth { terms, .. } => {
            let x_k = t_k * u_lin + t_off;
            let value = constraint_value(def, &x_k, u_lin);
            // grad over u: Σ poly'(wᵀx)·wᵀT_k + x_linᵀT_k + u_coeffᵀ
            let mut grad = match &def.form {
                ConstraintForm::Smooth { x_lin, u_coeff, .. } => {
                    (x_lin.transpose() * t_k).transpose() + u_coeff
                }
                _ => unreachable!(),
            };
            for t in terms {
                let y = t.weights.dot(&x_k);
                let slope = t.poly.deriv1(y);
                grad += slope * (t.weights.transpose() * t_k).transpose();
            }
            // value(u_lin) + grad·(u − u_lin) ≤ 0
            let rhs_u = grad.dot(u_lin) - value;
            (grad, rhs_u)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_problem(n: usize) -> MpcProblem {
        let dyn_k = StageDynamics {
            a: DMatrix::from_element(1, 1, 1.0),
            b: DMatrix::from_element(1, 1, 0.5),
            c: DVector::from_element(1, 0.1),
        };
        MpcProblem {
            horizon: n,
            state_dim: 1,
            control_dim: 1,
            dynamics: vec![dyn_k; n],
            cost: QuadCost {
                w_track: DVector::from_element(1, 1.0),
                target: 1.0,
                q: 2.0,
                q_terminal: 2.0,
                r: 0.5,
                control_scale: 1.0,
                reg: 0.0,
            },
            constraints: vec![],
            x0: DVector::from_element(1, 0.2),
            slack_weight: None,
        }
    }

    #[test]
    fn condensation_reproduces_forward_simulation() {
        let p = scalar_problem(3);
        let c = condense(&p);
        let u = DVector::from_vec(vec![0.3, -0.2, 0.5]);
        let mut x = p.x0.clone();
        for k in 0..3 {
            let pred = &c.t_mats[k] * &u + &c.t_offs[k];
            assert_relative_eq!(pred[0], x[0], max_relative = 1e-12);
            let d = &p.dynamics[k];
            x = &d.a * &x + &d.b * DVector::from_element(1, u[k]) + &d.c;
        }
        let pred = &c.t_mats[3] * &u + &c.t_offs[3];
        assert_relative_eq!(pred[0], x[0], max_relative = 1e-12);
    }

    #[test]
    fn phi_tracks_initial_state_sensitivity() {
        let p = scalar_problem(4);
        let c = condense(&p);
        // a = 1 ⇒ ∂x_k/∂x0 = 1 for every k.
        for k in 0..=4 {
            assert_relative_eq!(c.phi[k][(0, 0)], 1.0, max_relative = 1e-14);
        }
    }

    #[test]
    fn condensed_cost_matches_explicit_sum() {
        let p = scalar_problem(3);
        let c = condense(&p);
        let (h, g, c0) = condensed_cost(&p, &c);
        let u = DVector::from_vec(vec![0.4, 0.1, -0.3]);
        let qp_cost = 0.5 * (&h * &u).dot(&u) + g.dot(&u) + c0;

        let mut x = p.x0.clone();
        let mut direct = 0.0;
        for k in 0..3 {
            direct += p.cost.q * (x[0] - p.cost.target).powi(2) + p.cost.r * u[k] * u[k];
            let d = &p.dynamics[k];
            x = &d.a * &x + &d.b * DVector::from_element(1, u[k]) + &d.c;
        }
        direct += p.cost.q_terminal * (x[0] - p.cost.target).powi(2);
        assert_relative_eq!(qp_cost, direct, max_relative = 1e-12);
    }

    #[test]
    fn affine_rows_condense_exactly() {
        let mut p = scalar_problem(2);
        p.constraints.push(ConstraintDef {
            kind: ConstraintKind::Stealth,
            stage: 2,
            form: ConstraintForm::Affine {
                x_coeff: DVector::from_element(1, 1.0),
                u_coeff: DVector::zeros(2),
                rhs: 0.9,
            },
            label: "x2 bound".into(),
        });
        p.validate().unwrap();
        let c = condense(&p);
        let (row, rhs) = linearize_constraint(&p.constraints[0], &c, &DVector::zeros(2));
        let u = DVector::from_vec(vec![0.2, 0.3]);
        let x2 = &c.t_mats[2] * &u + &c.t_offs[2];
        assert_relative_eq!(row.dot(&u) - rhs, x2[0] - 0.9, max_relative = 1e-12);
    }

    #[test]
    fn smooth_rows_linearize_to_first_order() {
        let mut p = scalar_problem(2);
        p.constraints.push(ConstraintDef {
            kind: ConstraintKind::Stealth,
            stage: 1,
            form: ConstraintForm::Smooth {
                terms: vec![SmoothTerm {
                    weights: DVector::from_element(1, 1.0),
                    poly: Polynomial::new(vec![0.0, 0.0, 1.0]),
                }],
                x_lin: DVector::zeros(1),
                u_coeff: DVector::zeros(2),
                rhs: 0.5,
            },
            label: "quadratic bound".into(),
        });
        let c = condense(&p);
        let u0 = DVector::from_vec(vec![0.1, 0.0]);
        let (row, rhs) = linearize_constraint(&p.constraints[0], &c, &u0);
        // At the linearization point the linear model is exact.
        let x1 = &c.t_mats[1] * &u0 + &c.t_offs[1];
        let exact = constraint_value(&p.constraints[0], &x1, &u0);
        assert_relative_eq!(row.dot(&u0) - rhs, exact, max_relative = 1e-10);
        // A small move keeps the error second order.
        let du = DVector::from_vec(vec![1e-4, 0.0]);
        let u1 = &u0 + &du;
        let x1p = &c.t_mats[1] * &u1 + &c.t_offs[1];
        let exact1 = constraint_value(&p.constraints[0], &x1p, &u1);
        let lin1 = row.dot(&u1) - rhs;
        assert!((exact1 - lin1).abs() < 1e-7);
    }

    #[test]
    fn zero_horizon_is_rejected() {
        let mut p = scalar_problem(1);
        p.horizon = 0;
        p.dynamics.clear();
        assert!(p.validate().is_err());
    }

    #[test]
    fn degenerate_cost_weights_are_rejected() {
        let mut p = scalar_problem(1);
        p.cost.q = 0.0;
        p.cost.q_terminal = 0.0;
        p.cost.r = 0.0;
        assert!(p.validate().is_err());
    }
}
