//! Constructs the two concrete MPC problems: the high-fidelity adversarial
//! problem over the particle concentration state and the low-fidelity
//! problem over the equivalent-circuit state of charge.
//!
//! Both use the incremental-current convention: the model state is
//! augmented with the previously applied current, z = [x; I_prev], the
//! control is ΔI, and the applied current is I = I_prev + ΔI.

use super::problem::{
    ConstraintDef, ConstraintForm, ConstraintKind, MpcProblem, QuadCost, SmoothTerm, StageDynamics,
};
use crate::attack::AttackLevel;
use crate::error::{Error, Result};
use crate::ocv::Polynomial;
use crate::rint::RintParams;
use crate::spm::{self, SpmParams};
use nalgebra::{DMatrix, DVector};

/// Operating limits shared by both fidelities, in plant units (current as
/// density, A/m²).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Limits {
    pub soc_max: f64,
    /// Maximum current density (A/m²).
    pub i_max: f64,
    pub v_max: f64,
    /// Desired state of charge the cost tracks.
    pub soc_d: f64,
}

impl Limits {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("soc_max", self.soc_max),
            ("i_max", self.i_max),
            ("v_max", self.v_max),
            ("soc_d", self.soc_d),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParam(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.soc_d > self.soc_max {
            return Err(Error::InvalidParam(format!(
                "soc_d ({}) must not exceed soc_max ({})",
                self.soc_d, self.soc_max
            )));
        }
        Ok(())
    }
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            soc_max: 0.85,
            i_max: 60.0,
            v_max: 4.25,
            soc_d: 0.8,
        }
    }
}

/// Bulk-soc output weights over the augmented high-fidelity state:
/// 3·wᵢrᵢ²Δr/(R_s³·c_max⁻) on the anode nodes, zero elsewhere.
fn bulk_weights_aug(spm: &SpmParams) -> DVector<f64> {
    let n = spm.n_nodes;
    let w = spm::trapezoid_weights(spm.r_s, n);
    let mut v = DVector::<f64>::zeros(2 * n + 1);
    for i in 0..n {
        v[i] = 3.0 * w[i] / (spm.r_s.powi(3) * spm.anode.c_max);
    }
    v
}

/// Builds the adversarial high-fidelity problem: concentration dynamics
/// composed over `substeps` plant steps per control period, bulk-soc
/// tracking cost, the adversarial surface-vs-bulk gap row at each
/// predicted stage, and stealth rows (bulk soc, current, terminal voltage)
/// that keep the defender's view nominal.
#[allow(clippy::too_many_arguments)]
pub fn build_high_fidelity_problem(
    spm: &SpmParams,
    theta_h: (f64, f64),
    gamma: AttackLevel,
    limits: &Limits,
    x0_conc: &DVector<f64>,
    i_init: f64,
    horizon: usize,
    substeps: usize,
) -> Result<MpcProblem> {
    if horizon == 0 {
        return Err(Error::BadInput("horizon must be at least 1".into()));
    }
    if substeps == 0 {
        return Err(Error::BadInput("substeps must be at least 1".into()));
    }
    if !gamma.is_valid() {
        return Err(Error::InvalidParam(format!(
            "attack level requires finite gamma1, gamma2 >= 0, got ({}, {})",
            gamma.gamma1, gamma.gamma2
        )));
    }
    limits.validate()?;
    let (q_h, r_h) = theta_h;
    if q_h < 0.0 || r_h < 0.0 || q_h + r_h <= 0.0 {
        return Err(Error::InvalidParam(format!(
            "theta_H must be nonnegative with q + r > 0, got ({q_h}, {r_h})"
        )));
    }
    let ops = spm::build_diffusion_operators(spm)?;
    let n = spm.n_nodes;
    let dim = 2 * n;
    if x0_conc.len() != dim {
        return Err(Error::BadInput(format!(
            "initial concentration has {} entries, expected {dim}",
            x0_conc.len()
        )));
    }

    // One control period: x⁺ = Mˢ·x + (Σ_{j<s} Mʲ)·b·I with I held.
    let m_step = DMatrix::<f64>::identity(dim, dim) + &ops.a_diff;
    let mut m_pow = DMatrix::<f64>::identity(dim, dim);
    let mut geom = DMatrix::<f64>::zeros(dim, dim);
    for _ in 0..substeps {
        geom += &m_pow;
        m_pow = &m_pow * &m_step;
    }
    let b_eff = &geom * &ops.b_diff;

    let zdim = dim + 1;
    let mut a_z = DMatrix::<f64>::zeros(zdim, zdim);
    a_z.view_mut((0, 0), (dim, dim)).copy_from(&m_pow);
    for i in 0..dim {
        a_z[(i, dim)] = b_eff[i];
    }
    a_z[(dim, dim)] = 1.0;
    let mut b_z = DMatrix::<f64>::zeros(zdim, 1);
    for i in 0..dim {
        b_z[(i, 0)] = b_eff[i];
    }
    b_z[(dim, 0)] = 1.0;
    let stage = StageDynamics {
        a: a_z,
        b: b_z,
        c: DVector::zeros(zdim),
    };

    let w_bulk = bulk_weights_aug(spm);
    let mut surf = DVector::<f64>::zeros(zdim);
    surf[n - 1] = 1.0 / spm.anode.c_max;
    let mut e_iprev = DVector::<f64>::zeros(zdim);
    e_iprev[dim] = 1.0;
    let n_u = horizon;

    let mut constraints = Vec::new();
    for k in 1..=horizon {
        // surf − (1+γ₁)·bulk − γ₂ ≥ 0, flipped to ≤ 0 form.
        constraints.push(ConstraintDef {
            kind: ConstraintKind::Adversarial,
            stage: k,
            form: ConstraintForm::Affine {
                x_coeff: (1.0 + gamma.gamma1) * &w_bulk - &surf,
                u_coeff: DVector::zeros(n_u),
                rhs: -gamma.gamma2,
            },
            label: format!("adversarial_gap@{k}"),
        });
        constraints.push(ConstraintDef {
            kind: ConstraintKind::Stealth,
            stage: k,
            form: ConstraintForm::Affine {
                x_coeff: w_bulk.clone(),
                u_coeff: DVector::zeros(n_u),
                rhs: limits.soc_max,
            },
            label: format!("soc_bulk@{k}"),
        });
    }
    let neg_un = Polynomial::new(spm.anode.ocv.coeffs.iter().map(|c| -c).collect());
    let mut theta_p = DVector::<f64>::zeros(zdim);
    theta_p[dim - 1] = 1.0 / spm.cathode.c_max;
    let mut theta_n = DVector::<f64>::zeros(zdim);
    theta_n[n - 1] = 1.0 / spm.anode.c_max;
    for k in 0..horizon {
        let mut e_k = DVector::<f64>::zeros(n_u);
        e_k[k] = 1.0;
        constraints.push(ConstraintDef {
            kind: ConstraintKind::Stealth,
            stage: k,
            form: ConstraintForm::Affine {
                x_coeff: e_iprev.clone(),
                u_coeff: e_k.clone(),
                rhs: limits.i_max,
            },
            label: format!("current@{k}"),
        });
        constraints.push(ConstraintDef {
            kind: ConstraintKind::Stealth,
            stage: k,
            form: ConstraintForm::Smooth {
                terms: vec![
                    SmoothTerm {
                        weights: theta_p.clone(),
                        poly: spm.cathode.ocv.clone(),
                    },
                    SmoothTerm {
                        weights: theta_n.clone(),
                        poly: neg_un.clone(),
                    },
                ],
                x_lin: spm.r_lump * &e_iprev,
                u_coeff: spm.r_lump * e_k,
                rhs: limits.v_max,
            },
            label: format!("voltage@{k}"),
        });
    }

    let mut x0 = DVector::<f64>::zeros(zdim);
    for i in 0..dim {
        x0[i] = x0_conc[i];
    }
    x0[dim] = i_init;

    let problem = MpcProblem {
        horizon,
        state_dim: zdim,
        control_dim: 1,
        dynamics: vec![stage; horizon],
        cost: QuadCost {
            w_track: w_bulk,
            target: limits.soc_d,
            q: q_h,
            q_terminal: q_h,
            r: r_h,
            control_scale: limits.i_max,
            reg: if r_h == 0.0 { 1e-10 } else { 0.0 },
        },
        constraints,
        x0,
        slack_weight: None,
    };
    problem.validate()?;
    Ok(problem)
}

/// Builds the low-fidelity problem over z = [soc; I_prev] in amperes:
/// coulomb-counting dynamics, soc tracking cost, and the Eq-style stealth
/// rows (soc bound, current bound, OCV + ohmic voltage bound).
pub fn build_low_fidelity_problem(
    rint: &RintParams,
    theta: (f64, f64),
    limits: &Limits,
    soc0: f64,
    i_init_amps: f64,
    horizon: usize,
    dt_ctrl: f64,
) -> Result<MpcProblem> {
    if horizon == 0 {
        return Err(Error::BadInput("horizon must be at least 1".into()));
    }
    if !(dt_ctrl > 0.0) {
        return Err(Error::InvalidParam(format!(
            "control period must be > 0, got {dt_ctrl}"
        )));
    }
    rint.validate()?;
    limits.validate()?;
    let (q, r) = theta;
    if q < 0.0 || r < 0.0 || q + r <= 0.0 {
        return Err(Error::InvalidParam(format!(
            "theta must be nonnegative with q + r > 0, got ({q}, {r})"
        )));
    }
    let beta = rint.eta * dt_ctrl / rint.q_c;
    let a = DMatrix::from_row_slice(2, 2, &[1.0, beta, 0.0, 1.0]);
    let b = DMatrix::from_column_slice(2, 1, &[beta, 1.0]);
    let stage = StageDynamics {
        a,
        b,
        c: DVector::zeros(2),
    };
    let i_max_amps = limits.i_max * rint.area;
    let n_u = horizon;

    let mut constraints = Vec::new();
    for k in 1..=horizon {
        constraints.push(ConstraintDef {
            kind: ConstraintKind::Stealth,
            stage: k,
            form: ConstraintForm::Affine {
                x_coeff: DVector::from_vec(vec![1.0, 0.0]),
                u_coeff: DVector::zeros(n_u),
                rhs: limits.soc_max,
            },
            label: format!("soc@{k}"),
        });
    }
    for k in 0..horizon {
        let mut e_k = DVector::<f64>::zeros(n_u);
        e_k[k] = 1.0;
        constraints.push(ConstraintDef {
            kind: ConstraintKind::Stealth,
            stage: k,
            form: ConstraintForm::Affine {
                x_coeff: DVector::from_vec(vec![0.0, 1.0]),
                u_coeff: e_k.clone(),
                rhs: i_max_amps,
            },
            label: format!("current@{k}"),
        });
        constraints.push(ConstraintDef {
            kind: ConstraintKind::Stealth,
            stage: k,
            form: ConstraintForm::Smooth {
                terms: vec![SmoothTerm {
                    weights: DVector::from_vec(vec![1.0, 0.0]),
                    poly: rint.ocv.clone(),
                }],
                x_lin: DVector::from_vec(vec![0.0, rint.r_0]),
                u_coeff: rint.r_0 * e_k,
                rhs: limits.v_max,
            },
            label: format!("voltage@{k}"),
        });
    }

    let problem = MpcProblem {
        horizon,
        state_dim: 2,
        control_dim: 1,
        dynamics: vec![stage; horizon],
        cost: QuadCost {
            w_track: DVector::from_vec(vec![1.0, 0.0]),
            target: limits.soc_d,
            q,
            q_terminal: q,
            r,
            control_scale: i_max_amps,
            reg: if r == 0.0 { 1e-10 } else { 0.0 },
        },
        constraints,
        x0: DVector::from_vec(vec![soc0, i_init_amps]),
        slack_weight: None,
    };
    problem.validate()?;
    Ok(problem)
}
