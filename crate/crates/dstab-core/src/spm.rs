//! Two-particle (anode + cathode) spherical-diffusion battery model.
//!
//! Each electrode is represented by one spherical particle with Fickian
//! solid diffusion, ∂c/∂t = (1/r²)·∂/∂r(D r² ∂c/∂r), discretized on
//! `n_nodes` radial nodes and stepped with explicit Euler. The applied
//! current density enters through the surface Neumann flux (charging
//! positive: lithium flows into the anode particle and out of the cathode
//! particle), the center node uses the r → 0 symmetry limit 3D·∂²c/∂r²,
//! and interior nodes use half-node flux balances.
//!
//! The stencil is arranged so that the trapezoid-weighted bulk state of
//! charge is an exact discrete invariant of the zero-current operator:
//! every row is a flux difference (row sums vanish, so uniform profiles are
//! fixed points), and each interface flux enters the two adjacent rows with
//! weights that cancel exactly under the trapezoid quadrature. The center
//! node carries zero trapezoid weight (r₁ = 0), so its exchange flux is
//! kept only in the center row; the first off-center row therefore couples
//! outward only. Under constant current the bulk state of charge then
//! advances by exactly dt·3I/(F·a⁻·L⁻·R_s·c_max⁻) per step, which is what
//! the coulomb-counting checks pin down.

use crate::error::{Error, Result};
use crate::ocv::Polynomial;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Default Faraday constant (C/mol).
pub const FARADAY: f64 = 96487.0;

/// Per-electrode transport and geometry parameters (SI units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeParams {
    /// Solid diffusion coefficient D_s (m²/s).
    pub d_s: f64,
    /// Specific interfacial area a (1/m).
    pub a_s: f64,
    /// Electrode thickness L (m).
    pub thickness: f64,
    /// Maximum solid concentration c_max (mol/m³).
    pub c_max: f64,
    /// Open-circuit potential as a polynomial in surface stoichiometry.
    pub ocv: Polynomial,
    /// Stoichiometry window (θ at empty, θ at full) used for initialization
    /// and as the fitted domain of the OCV curve.
    pub theta_window: (f64, f64),
}

/// Parameters of the two-particle model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpmParams {
    pub anode: ElectrodeParams,
    pub cathode: ElectrodeParams,
    /// Particle radius R_s (m), shared by both electrodes.
    pub r_s: f64,
    /// Faraday constant (C/mol).
    pub faraday: f64,
    /// Radial node count per electrode (fixed at 10).
    pub n_nodes: usize,
    /// Simulation step (s); must respect the explicit-Euler stability bound.
    pub dt: f64,
    /// Lumped ohmic resistance (Ω·m²) between the particles and the
    /// terminals.
    pub r_lump: f64,
}

impl Default for SpmParams {
    fn default() -> Self {
        // Graphite/LCO-flavored parameter set; OCV curves are smooth
        // monotone fits over the stoichiometry windows below.
        Self {
            anode: ElectrodeParams {
                d_s: 3.9e-14,
                a_s: 1.8e5,
                thickness: 100e-6,
                c_max: 24983.0,
                ocv: Polynomial::new(vec![0.78, -2.1, 2.1, -0.7]),
                theta_window: (0.0, 1.0),
            },
            cathode: ElectrodeParams {
                d_s: 1.0e-13,
                a_s: 1.5e5,
                thickness: 100e-6,
                c_max: 51218.0,
                ocv: Polynomial::new(vec![4.6, -0.6, -0.1]),
                theta_window: (0.3647, 0.95),
            },
            r_s: 10e-6,
            faraday: FARADAY,
            n_nodes: 10,
            dt: 1.0,
            r_lump: 2e-3,
        }
    }
}

impl SpmParams {
    /// Radial node spacing Δr = R_s / (n_nodes − 1).
    pub fn dr(&self) -> f64 {
        self.r_s / (self.n_nodes as f64 - 1.0)
    }

    /// Validates positivity, the fixed node count and step stability.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("anode.d_s", self.anode.d_s),
            ("anode.a_s", self.anode.a_s),
            ("anode.thickness", self.anode.thickness),
            ("anode.c_max", self.anode.c_max),
            ("cathode.d_s", self.cathode.d_s),
            ("cathode.a_s", self.cathode.a_s),
            ("cathode.thickness", self.cathode.thickness),
            ("cathode.c_max", self.cathode.c_max),
            ("r_s", self.r_s),
            ("faraday", self.faraday),
            ("dt", self.dt),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParam(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.r_lump < 0.0 || !self.r_lump.is_finite() {
            return Err(Error::InvalidParam(format!(
                "r_lump must be >= 0, got {}",
                self.r_lump
            )));
        }
        if self.n_nodes != 10 {
            return Err(Error::InvalidParam(format!(
                "n_nodes is fixed at 10, got {}",
                self.n_nodes
            )));
        }
        for (name, w) in [
            ("anode.theta_window", self.anode.theta_window),
            ("cathode.theta_window", self.cathode.theta_window),
        ] {
            if !(w.0 >= 0.0 && w.1 <= 1.0 && w.0 < w.1) {
                return Err(Error::InvalidParam(format!(
                    "{name} must satisfy 0 <= lo < hi <= 1, got ({}, {})",
                    w.0, w.1
                )));
            }
        }
        // Stability is checked against the operators actually in use.
        build_diffusion_operators(self).map(|_| ())
    }
}

/// Full model state: concentration profile and the previously applied
/// current density.
#[derive(Debug, Clone, PartialEq)]
pub struct SpmState {
    /// Concentrations (mol/m³). Entries `0..n` are anode nodes ordered
    /// center → surface; entries `n..2n` are the cathode nodes in the same
    /// order.
    pub conc: DVector<f64>,
    /// Current density applied in the previous step (A/m²); controls are
    /// increments on top of this value.
    pub i_prev: f64,
}

/// Discrete diffusion update `c⁺ = c + A·c + B·i` for both electrodes.
#[derive(Debug, Clone)]
pub struct DiffusionOperators {
    /// Block-diagonal update matrix over (anode, cathode), scaled by dt.
    pub a_diff: DMatrix<f64>,
    /// Current-density injection vector, scaled by dt. Positive entry on
    /// the anode surface node, negative on the cathode surface node.
    pub b_diff: DVector<f64>,
    /// Maximum admissible step for explicit-Euler stability (s).
    pub dt_max: f64,
    /// Nodes per electrode.
    pub n: usize,
}

/// Builds one electrode block of the diffusion update.
///
/// `sign` is +1 for the anode (charging current pushes lithium in) and −1
/// for the cathode. Returns the dt-scaled block, the dt-scaled injection
/// entry for the surface node, and the stability bound for this electrode.
fn electrode_block(
    e: &ElectrodeParams,
    r_s: f64,
    n: usize,
    dt: f64,
    faraday: f64,
    sign: f64,
) -> (DMatrix<f64>, f64, f64) {
    let dr = r_s / (n as f64 - 1.0);
    let kappa = dt * e.d_s / (dr * dr);
    let mut a = DMatrix::<f64>::zeros(n, n);

    // Center node: symmetry limit 3D·∂²c/∂r² with a ghost mirror node,
    // giving 6D(c₁ − c₀)/Δr².
    a[(0, 1)] = 6.0 * kappa;
    a[(0, 0)] = -6.0 * kappa;

    // First off-center node: outward half-node flux only. The inward
    // interface is owned by the center row; the center carries zero
    // trapezoid weight, so keeping its mirror here would leak
    // trapezoid-weighted mass.
    a[(1, 2)] = kappa * 1.5 * 1.5;
    a[(1, 1)] = -a[(1, 2)];

    // Interior nodes: half-node flux balance normalized by r_i².
    for i in 2..n - 1 {
        let ri = i as f64;
        let inner = kappa * (ri - 0.5) * (ri - 0.5) / (ri * ri);
        let outer = kappa * (ri + 0.5) * (ri + 0.5) / (ri * ri);
        a[(i, i - 1)] = inner;
        a[(i, i + 1)] = outer;
        a[(i, i)] = -(inner + outer);
    }

    // Surface node: half-node flux against the trapezoid node mass R_s²/2,
    // which is what makes the boundary source integrate to the exact
    // coulomb-counting rate.
    let rn = n as f64 - 1.0;
    let inner = kappa * (rn - 0.5) * (rn - 0.5) * 2.0 / (rn * rn);
    a[(n - 1, n - 2)] = inner;
    a[(n - 1, n - 1)] = -inner;

    // Neumann flux folded into the surface row: ∂c/∂r(R_s) = ±I/(D F a L),
    // scaled by D·R_s²/(node mass · Δr) = 2D/Δr against the same mass.
    let b_surf = sign * 2.0 * dt / (faraday * e.a_s * e.thickness * dr);

    // Gershgorin: eigenvalues lie in [2·min diag, 0]; Euler is stable for
    // dt·|λ|max ≤ 2. The center row dominates with |diag| = 6·D/Δr².
    let max_coeff = (0..n)
        .map(|i| a[(i, i)].abs() / dt)
        .fold(0.0_f64, f64::max);
    let dt_max = 1.0 / max_coeff;

    (a, b_surf, dt_max)
}

/// Builds the block-diagonal diffusion operators for both electrodes,
/// rejecting steps beyond the explicit-Euler stability bound.
pub fn build_diffusion_operators(params: &SpmParams) -> Result<DiffusionOperators> {
    build_diffusion_operators_with_nodes(params, params.n_nodes, params.dt)
}

/// Refinement-mode builder: same stencil on an arbitrary node count and
/// step. Used by convergence and reference-solution checks.
pub fn build_diffusion_operators_with_nodes(
    params: &SpmParams,
    n: usize,
    dt: f64,
) -> Result<DiffusionOperators> {
    if n < 4 {
        return Err(Error::InvalidParam(format!(
            "n_nodes must be at least 4, got {n}"
        )));
    }
    let (a_n, b_n, dt_max_n) = electrode_block(&params.anode, params.r_s, n, dt, params.faraday, 1.0);
    let (a_p, b_p, dt_max_p) =
        electrode_block(&params.cathode, params.r_s, n, dt, params.faraday, -1.0);
    let dt_max = dt_max_n.min(dt_max_p);
    if dt > dt_max {
        return Err(Error::UnstableDt { dt, dt_max });
    }
    let mut a = DMatrix::<f64>::zeros(2 * n, 2 * n);
    a.view_mut((0, 0), (n, n)).copy_from(&a_n);
    a.view_mut((n, n), (n, n)).copy_from(&a_p);
    let mut b = DVector::<f64>::zeros(2 * n);
    b[n - 1] = b_n;
    b[2 * n - 1] = b_p;
    Ok(DiffusionOperators {
        a_diff: a,
        b_diff: b,
        dt_max,
        n,
    })
}

/// Trapezoid quadrature weights w_i·r_i²·Δr over one electrode's nodes
/// (w = ½ at the center and surface, 1 elsewhere).
pub fn trapezoid_weights(r_s: f64, n: usize) -> Vec<f64> {
    let dr = r_s / (n as f64 - 1.0);
    (0..n)
        .map(|i| {
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            let r = i as f64 * dr;
            w * r * r * dr
        })
        .collect()
}

/// Volume-averaged anode state of charge via trapezoid quadrature:
/// 3·Σ wᵢ rᵢ² c[i] Δr / (R_s³ c_max⁻).
pub fn bulk_soc(params: &SpmParams, conc: &DVector<f64>) -> f64 {
    bulk_soc_nodes(params, conc, params.n_nodes)
}

/// Refinement-mode bulk state of charge for an arbitrary node count.
pub fn bulk_soc_nodes(params: &SpmParams, conc: &DVector<f64>, n: usize) -> f64 {
    let w = trapezoid_weights(params.r_s, n);
    let sum: f64 = w.iter().zip(conc.iter()).map(|(wi, ci)| wi * ci).sum();
    3.0 * sum / (params.r_s.powi(3) * params.anode.c_max)
}

/// Anode surface state of charge: surface concentration over c_max⁻.
pub fn surf_soc(params: &SpmParams, conc: &DVector<f64>) -> f64 {
    conc[params.n_nodes - 1] / params.anode.c_max
}

/// Terminal voltage at the given state under `i_applied` (A/m²):
/// U⁺(θ⁺_surf) − U⁻(θ⁻_surf) + R_lump·i (charging-positive current raises
/// the terminal voltage). Returns the voltage and a flag set when either
/// surface stoichiometry had to be clamped to its OCV window.
pub fn terminal_voltage(params: &SpmParams, state: &SpmState, i_applied: f64) -> (f64, bool) {
    let n = params.n_nodes;
    let theta_n = state.conc[n - 1] / params.anode.c_max;
    let theta_p = state.conc[2 * n - 1] / params.cathode.c_max;
    let (tn, cn) = clamp_to(theta_n, params.anode.theta_window);
    let (tp, cp) = clamp_to(theta_p, params.cathode.theta_window);
    let v = params.cathode.ocv.eval(tp) - params.anode.ocv.eval(tn) + params.r_lump * i_applied;
    (v, cn || cp)
}

fn clamp_to(x: f64, window: (f64, f64)) -> (f64, bool) {
    if x < window.0 {
        (window.0, true)
    } else if x > window.1 {
        (window.1, true)
    } else {
        (x, false)
    }
}

/// Initial state at a uniform anode state of charge.
///
/// The anode is filled uniformly to `soc·c_max⁻`; the cathode stoichiometry
/// complements it through the configured window, moving from its full end
/// toward its empty end as the anode fills.
pub fn init_state(params: &SpmParams, soc: f64) -> Result<SpmState> {
    if !(0.0..=1.0).contains(&soc) {
        return Err(Error::InvalidParam(format!(
            "initial soc must lie in [0, 1], got {soc}"
        )));
    }
    let n = params.n_nodes;
    let (p_lo, p_hi) = params.cathode.theta_window;
    let theta_p = p_hi - (p_hi - p_lo) * soc;
    let mut conc = DVector::<f64>::zeros(2 * n);
    for i in 0..n {
        conc[i] = soc * params.anode.c_max;
        conc[n + i] = theta_p * params.cathode.c_max;
    }
    Ok(SpmState { conc, i_prev: 0.0 })
}

/// Advances the state one step under the control increment `delta_i`
/// (A/m²) on top of the previously applied current.
pub fn step(
    params: &SpmParams,
    ops: &DiffusionOperators,
    state: &SpmState,
    delta_i: f64,
) -> Result<SpmState> {
    if !delta_i.is_finite() || !state.i_prev.is_finite() {
        return Err(Error::NonFinite("applied current"));
    }
    if state.conc.len() != 2 * ops.n {
        return Err(Error::BadInput(format!(
            "state has {} nodes, operators expect {}",
            state.conc.len(),
            2 * ops.n
        )));
    }
    let i_total = state.i_prev + delta_i;
    let conc = &state.conc + &ops.a_diff * &state.conc + &ops.b_diff * i_total;
    if conc.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("concentration update"));
    }
    let _ = params;
    Ok(SpmState {
        conc,
        i_prev: i_total,
    })
}

/// Closed-form per-step bulk state-of-charge rate under current density
/// `i` (A/m²): dt·3I/(F·a⁻·L⁻·R_s·c_max⁻).
pub fn coulomb_rate_per_step(params: &SpmParams, i: f64) -> f64 {
    params.dt * 3.0 * i
        / (params.faraday
            * params.anode.a_s
            * params.anode.thickness
            * params.r_s
            * params.anode.c_max)
}

/// Recorded closed-loop or open-loop run of the plant.
///
/// All sequences share one length. `currents[k]` is the current density
/// applied during `[t_k, t_{k+1})`; the final entry repeats the last held
/// current so the columns stay aligned. `voltages[k]` is the terminal
/// voltage at state `k` under `currents[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub currents: Vec<f64>,
    pub voltages: Vec<f64>,
    pub soc_bulk: Vec<f64>,
    pub soc_surf: Vec<f64>,
    /// Full concentration vectors per sample (may be empty for reduced-order
    /// sources, in which case CSV export writes zeros).
    pub states: Vec<DVector<f64>>,
    /// Set where an OCV evaluation clamped the surface stoichiometry.
    pub clamp_flags: Vec<bool>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Copy with the current column scaled by `factor` (e.g. electrode area
    /// to convert densities to amperes).
    pub fn with_scaled_currents(&self, factor: f64) -> Trajectory {
        let mut t = self.clone();
        for c in &mut t.currents {
            *c *= factor;
        }
        t
    }

    /// Writes the trajectory as CSV with the schema
    /// `time_s,current_A_per_m2,voltage_V,soc_bulk,soc_surf,conc_1..conc_2n`.
    pub fn to_csv<W: std::io::Write>(&self, out: W, n_conc: usize) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![
            "time_s".to_string(),
            "current_A_per_m2".to_string(),
            "voltage_V".to_string(),
            "soc_bulk".to_string(),
            "soc_surf".to_string(),
        ];
        for i in 1..=n_conc {
            header.push(format!("conc_{i}"));
        }
        w.write_record(&header)?;
        for k in 0..self.len() {
            let mut rec = vec![
                self.times[k].to_string(),
                self.currents[k].to_string(),
                self.voltages[k].to_string(),
                self.soc_bulk[k].to_string(),
                self.soc_surf[k].to_string(),
            ];
            for i in 0..n_conc {
                let v = self.states.get(k).map_or(0.0, |s| {
                    if i < s.len() {
                        s[i]
                    } else {
                        0.0
                    }
                });
                rec.push(v.to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a trajectory from the CSV schema written by [`Trajectory::to_csv`].
    pub fn from_csv<R: std::io::Read>(input: R, dt: f64) -> Result<Trajectory> {
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers()?.clone();
        let expected = ["time_s", "current_A_per_m2", "voltage_V", "soc_bulk", "soc_surf"];
        for (i, name) in expected.iter().enumerate() {
            if headers.get(i) != Some(*name) {
                return Err(Error::BadInput(format!(
                    "trajectory csv: expected column {} to be '{}', got '{}'",
                    i,
                    name,
                    headers.get(i).unwrap_or("<missing>")
                )));
            }
        }
        let n_conc = headers.len() - expected.len();
        let mut t = Trajectory {
            dt,
            times: vec![],
            currents: vec![],
            voltages: vec![],
            soc_bulk: vec![],
            soc_surf: vec![],
            states: vec![],
            clamp_flags: vec![],
        };
        for rec in rdr.records() {
            let rec = rec?;
            let f = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| Error::BadInput(format!("trajectory csv: missing field {i}")))?
                    .parse::<f64>()
                    .map_err(|e| Error::BadInput(format!("trajectory csv: {e}")))
            };
            t.times.push(f(0)?);
            t.currents.push(f(1)?);
            t.voltages.push(f(2)?);
            t.soc_bulk.push(f(3)?);
            t.soc_surf.push(f(4)?);
            let mut st = DVector::<f64>::zeros(n_conc);
            for i in 0..n_conc {
                st[i] = f(5 + i)?;
            }
            t.states.push(st);
            t.clamp_flags.push(false);
        }
        Ok(t)
    }
}

/// Rolls the model forward under a per-step applied current profile
/// (absolute densities, A/m²), recording every step.
pub fn simulate(params: &SpmParams, x0: &SpmState, profile: &[f64]) -> Result<Trajectory> {
    let ops = build_diffusion_operators(params)?;
    simulate_with_ops(params, &ops, x0, profile)
}

/// [`simulate`] with prebuilt operators, for callers stepping many profiles.
pub fn simulate_with_ops(
    params: &SpmParams,
    ops: &DiffusionOperators,
    x0: &SpmState,
    profile: &[f64],
) -> Result<Trajectory> {
    let mut traj = Trajectory {
        dt: params.dt,
        times: Vec::with_capacity(profile.len() + 1),
        currents: Vec::with_capacity(profile.len() + 1),
        voltages: Vec::with_capacity(profile.len() + 1),
        soc_bulk: Vec::with_capacity(profile.len() + 1),
        soc_surf: Vec::with_capacity(profile.len() + 1),
        states: Vec::with_capacity(profile.len() + 1),
        clamp_flags: Vec::with_capacity(profile.len() + 1),
    };
    let mut state = x0.clone();
    let record = |k: usize, state: &SpmState, i_now: f64, traj: &mut Trajectory| {
        let (v, clamped) = terminal_voltage(params, state, i_now);
        traj.times.push(k as f64 * params.dt);
        traj.currents.push(i_now);
        traj.voltages.push(v);
        traj.soc_bulk.push(bulk_soc(params, &state.conc));
        traj.soc_surf.push(surf_soc(params, &state.conc));
        traj.states.push(state.conc.clone());
        traj.clamp_flags.push(clamped);
    };
    for (k, &i_k) in profile.iter().enumerate() {
        record(k, &state, i_k, &mut traj);
        state = step(params, ops, &state, i_k - state.i_prev)?;
    }
    let hold = profile.last().copied().unwrap_or(x0.i_prev);
    record(profile.len(), &state, hold, &mut traj);
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params() -> SpmParams {
        SpmParams::default()
    }

    #[test]
    fn default_params_validate() {
        params().validate().unwrap();
    }

    #[test]
    fn operator_rows_sum_to_zero() {
        let ops = build_diffusion_operators(&params()).unwrap();
        for i in 0..2 * ops.n {
            let row_sum: f64 = (0..2 * ops.n).map(|j| ops.a_diff[(i, j)]).sum();
            assert!(row_sum.abs() < 1e-16, "row {i} sums to {row_sum}");
        }
    }

    #[test]
    fn trapezoid_weights_annihilate_each_diffusion_block() {
        // The quadrature vector is a left null vector of each electrode
        // block: the weighted column sums cancel to rounding error.
        let p = params();
        let ops = build_diffusion_operators(&p).unwrap();
        let w = trapezoid_weights(p.r_s, ops.n);
        let scale: f64 = ops.a_diff.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
            * w.iter().fold(0.0_f64, |m, v| m.max(*v));
        for block in 0..2 {
            for j in 0..ops.n {
                let col: f64 = (0..ops.n)
                    .map(|i| w[i] * ops.a_diff[(block * ops.n + i, block * ops.n + j)])
                    .sum();
                assert!(
                    col.abs() < 1e-12 * scale,
                    "weighted column {j} of block {block} = {col:e}"
                );
            }
        }
    }

    #[test]
    fn quadrature_defect_is_one_over_162() {
        // Trapezoid quadrature of r² on 10 nodes overshoots R³/3 by exactly
        // 1/162 (the composite error term is exact for quadratics).
        let p = params();
        let w = trapezoid_weights(p.r_s, 10);
        let quad: f64 = w.iter().sum();
        let exact = p.r_s.powi(3) / 3.0;
        let defect = (quad - exact) / exact;
        assert_relative_eq!(defect, 1.0 / 162.0, max_relative = 1e-12);
        assert!(defect.abs() < 1e-2);

        let state = init_state(&p, 1.0).unwrap();
        let soc = bulk_soc(&p, &state.conc);
        assert_relative_eq!(soc, 1.0 + 1.0 / 162.0, max_relative = 1e-12);
    }

    #[test]
    fn uniform_profile_is_a_fixed_point_at_zero_current() {
        let p = params();
        let ops = build_diffusion_operators(&p).unwrap();
        let x0 = init_state(&p, 0.5).unwrap();
        let mut state = x0.clone();
        for _ in 0..1000 {
            state = step(&p, &ops, &state, 0.0).unwrap();
        }
        let drift = (&state.conc - &x0.conc)
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(
            drift < 1e-12 * p.anode.c_max,
            "uniform profile drifted by {drift}"
        );
        let soc_drift = (bulk_soc(&p, &state.conc) - bulk_soc(&p, &x0.conc)).abs();
        assert!(soc_drift < 1e-9 * 0.5, "bulk soc drifted by {soc_drift}");
    }

    #[test]
    fn zero_current_conserves_bulk_soc_from_nonuniform_profiles() {
        // Sharper than the uniform case: seeded non-uniform profiles keep
        // the trapezoid-weighted bulk fixed to rounding error.
        let p = params();
        let ops = build_diffusion_operators(&p).unwrap();
        let mut lcg: u64 = 0x9e3779b97f4a7c15;
        for _ in 0..8 {
            let mut state = init_state(&p, 0.4).unwrap();
            for i in 0..state.conc.len() {
                lcg = lcg.wrapping_mul(6364136223846793005).wrapping_add(1);
                let u = (lcg >> 11) as f64 / (1u64 << 53) as f64;
                state.conc[i] *= 0.8 + 0.4 * u;
            }
            let soc0 = bulk_soc(&p, &state.conc);
            for _ in 0..200 {
                state = step(&p, &ops, &state, 0.0).unwrap();
            }
            let rel = ((bulk_soc(&p, &state.conc) - soc0) / soc0).abs();
            assert!(rel < 1e-12, "bulk soc drifted by {rel:e} at zero current");
        }
    }

    #[test]
    fn constant_current_matches_coulomb_counting_each_step() {
        let p = params();
        let ops = build_diffusion_operators(&p).unwrap();
        let i = 40.0;
        let rate = coulomb_rate_per_step(&p, i);
        let mut state = init_state(&p, 0.3).unwrap();
        let mut prev = bulk_soc(&p, &state.conc);
        for k in 0..500 {
            state = step(&p, &ops, &state, i - state.i_prev).unwrap();
            let cur = bulk_soc(&p, &state.conc);
            let inc = cur - prev;
            assert!(
                ((inc - rate) / rate).abs() < 1e-10,
                "step {k}: increment {inc:e} vs analytic {rate:e}"
            );
            prev = cur;
        }
        let total = prev - bulk_soc(&p, &init_state(&p, 0.3).unwrap().conc);
        assert_relative_eq!(total, 500.0 * rate, max_relative = 1e-10);
    }

    #[test]
    fn injection_signs_oppose_between_electrodes() {
        let ops = build_diffusion_operators(&params()).unwrap();
        assert!(ops.b_diff[ops.n - 1] > 0.0, "anode surface gains on charge");
        assert!(
            ops.b_diff[2 * ops.n - 1] < 0.0,
            "cathode surface loses on charge"
        );
    }

    #[test]
    fn unstable_step_is_rejected_naming_the_bound() {
        let mut p = params();
        p.dt = 10.0;
        let err = build_diffusion_operators(&p).unwrap_err();
        match err {
            Error::UnstableDt { dt, dt_max } => {
                assert_eq!(dt, 10.0);
                assert!(dt_max > 0.0 && dt_max < 10.0);
                let msg = format!("{}", Error::UnstableDt { dt, dt_max });
                assert!(msg.contains("maximum admissible dt"));
            }
            e => panic!("expected UnstableDt, got {e:?}"),
        }
    }

    #[test]
    fn default_step_sits_near_half_the_stability_bound() {
        let p = params();
        let ops = build_diffusion_operators(&p).unwrap();
        assert!(p.dt < ops.dt_max && p.dt > 0.25 * ops.dt_max);
    }

    #[test]
    fn one_step_tracks_a_fine_grid_reference() {
        // One coarse Euler step versus 100 substeps on a 10× finer grid,
        // starting from the same smooth profile. Coarse node i sits exactly
        // at fine node 11i (99 = 9·11).
        let p = params();
        let coarse = build_diffusion_operators(&p).unwrap();
        let n_fine = 100;
        let fine = build_diffusion_operators_with_nodes(&p, n_fine, p.dt / 100.0).unwrap();
        let smooth = |frac: f64, c0: f64| c0 * (1.0 + 0.2 * frac * frac);

        let mut conc_c = DVector::<f64>::zeros(20);
        let mut conc_f = DVector::<f64>::zeros(2 * n_fine);
        for i in 0..10 {
            conc_c[i] = smooth(i as f64 / 9.0, 0.5 * p.anode.c_max);
            conc_c[10 + i] = smooth(i as f64 / 9.0, 0.6 * p.cathode.c_max);
        }
        for i in 0..n_fine {
            conc_f[i] = smooth(i as f64 / 99.0, 0.5 * p.anode.c_max);
            conc_f[n_fine + i] = smooth(i as f64 / 99.0, 0.6 * p.cathode.c_max);
        }

        let i_app = 30.0;
        let stepped_c = &conc_c + &coarse.a_diff * &conc_c + &coarse.b_diff * i_app;
        let mut stepped_f = conc_f;
        for _ in 0..100 {
            stepped_f = &stepped_f + &fine.a_diff * &stepped_f + &fine.b_diff * i_app;
        }

        for i in 0..10 {
            let refv = stepped_f[11 * i];
            let rel = ((stepped_c[i] - refv) / refv).abs();
            assert!(rel < 1e-2, "anode node {i}: rel error {rel:e}");
            let refv = stepped_f[n_fine + 11 * i];
            let rel = ((stepped_c[10 + i] - refv) / refv).abs();
            assert!(rel < 1e-2, "cathode node {i}: rel error {rel:e}");
        }
    }

    #[test]
    fn refining_step_and_grid_reproduces_soc_rise_and_surface_transient() {
        // Both resolutions coulomb-count exactly, so the bulk rise over a
        // 500 s constant-current run matches to rounding error; the surface
        // transient converges with the grid.
        let p = params();
        let coarse = build_diffusion_operators(&p).unwrap();
        let fine = build_diffusion_operators_with_nodes(&p, 20, p.dt / 4.0).unwrap();
        let i_app = 40.0;

        let mut c = init_state(&p, 0.3).unwrap().conc;
        let soc0_coarse = bulk_soc(&p, &c);
        for _ in 0..500 {
            c = &c + &coarse.a_diff * &c + &coarse.b_diff * i_app;
        }
        let rise_coarse = bulk_soc(&p, &c) - soc0_coarse;
        let surf_coarse = c[9] / p.anode.c_max;

        let mut cf = DVector::<f64>::zeros(40);
        for i in 0..20 {
            cf[i] = 0.3 * p.anode.c_max;
            cf[20 + i] = 0.75 * p.cathode.c_max;
        }
        let soc0_fine = bulk_soc_nodes(&p, &cf, 20);
        for _ in 0..2000 {
            cf = &cf + &fine.a_diff * &cf + &fine.b_diff * i_app;
        }
        let rise_fine = bulk_soc_nodes(&p, &cf, 20) - soc0_fine;
        let surf_fine = cf[19] / p.anode.c_max;

        assert!(
            ((rise_coarse - rise_fine) / rise_fine).abs() < 1e-9,
            "bulk rise {rise_coarse} vs refined {rise_fine}"
        );
        assert!(
            ((surf_coarse - surf_fine) / surf_fine).abs() < 2e-2,
            "surface soc {surf_coarse} vs refined {surf_fine}"
        );
    }

    #[test]
    fn charging_builds_a_surface_to_bulk_gradient() {
        let p = params();
        let ops = build_diffusion_operators(&p).unwrap();
        let mut state = init_state(&p, 0.3).unwrap();
        for k in 0..100 {
            state = step(&p, &ops, &state, 40.0 - state.i_prev).unwrap();
            if k >= 1 {
                assert!(
                    surf_soc(&p, &state.conc) >= bulk_soc(&p, &state.conc),
                    "step {k}: surface lags bulk under sustained charging"
                );
            }
        }
    }

    #[test]
    fn rest_after_a_pulse_relaxes_the_gradient() {
        let p = params();
        let ops = build_diffusion_operators(&p).unwrap();
        let mut state = init_state(&p, 0.4).unwrap();
        for _ in 0..60 {
            state = step(&p, &ops, &state, 50.0 - state.i_prev).unwrap();
        }
        let gap_after_pulse = surf_soc(&p, &state.conc) - bulk_soc(&p, &state.conc);
        for _ in 0..600 {
            state = step(&p, &ops, &state, -state.i_prev).unwrap();
        }
        let gap_rested = surf_soc(&p, &state.conc) - bulk_soc(&p, &state.conc);
        assert!(gap_after_pulse > 1e-3);
        assert!(gap_rested.abs() < 0.2 * gap_after_pulse);
    }

    #[test]
    fn delta_current_cancelling_i_prev_is_a_rest_step() {
        let p = params();
        let ops = build_diffusion_operators(&p).unwrap();
        let mut charged = init_state(&p, 0.5).unwrap();
        charged.i_prev = 5.0;
        let stepped = step(&p, &ops, &charged, -5.0).unwrap();
        let mut rest = charged.clone();
        rest.i_prev = 0.0;
        let rest_stepped = step(&p, &ops, &rest, 0.0).unwrap();
        assert_eq!(stepped.conc, rest_stepped.conc);
        assert_eq!(stepped.i_prev, 0.0);
    }

    #[test]
    fn voltage_rises_with_charging_current_and_relaxes_at_rest() {
        let p = params();
        let state = init_state(&p, 0.5).unwrap();
        let (v0, _) = terminal_voltage(&p, &state, 0.0);
        let (v1, _) = terminal_voltage(&p, &state, 30.0);
        assert!(v1 > v0, "charging current must raise terminal voltage");
        assert_relative_eq!(v1 - v0, p.r_lump * 30.0, max_relative = 1e-12);
    }

    #[test]
    fn out_of_window_stoichiometry_sets_the_clamp_flag() {
        let p = params();
        let mut state = init_state(&p, 0.5).unwrap();
        state.conc[p.n_nodes - 1] = 1.2 * p.anode.c_max;
        let (_, clamped) = terminal_voltage(&p, &state, 0.0);
        assert!(clamped);
    }

    #[test]
    fn init_state_maps_the_cathode_window_linearly() {
        let p = params();
        let s = init_state(&p, 0.25).unwrap();
        let theta_p = s.conc[p.n_nodes] / p.cathode.c_max;
        let (lo, hi) = p.cathode.theta_window;
        assert_relative_eq!(theta_p, hi - 0.25 * (hi - lo), max_relative = 1e-12);
        assert!(init_state(&p, 1.5).is_err());
    }

    #[test]
    fn simulate_records_aligned_columns_and_monotone_charge() {
        let p = params();
        let x0 = init_state(&p, 0.3).unwrap();
        let profile = vec![40.0; 200];
        let t = simulate(&p, &x0, &profile).unwrap();
        assert_eq!(t.len(), 201);
        assert_eq!(t.currents.len(), 201);
        assert_eq!(t.states.len(), 201);
        assert!(t.soc_bulk.windows(2).all(|w| w[1] > w[0]));
        assert_relative_eq!(t.times[200], 200.0 * p.dt, max_relative = 1e-12);
    }

    #[test]
    fn simulate_with_empty_profile_returns_the_initial_sample() {
        let p = params();
        let x0 = init_state(&p, 0.3).unwrap();
        let t = simulate(&p, &x0, &[]).unwrap();
        assert_eq!(t.len(), 1);
        assert_relative_eq!(t.soc_bulk[0], bulk_soc(&p, &x0.conc), max_relative = 1e-14);
    }

    #[test]
    fn simulate_zero_profile_keeps_bulk_soc_to_1e9() {
        let p = params();
        let x0 = init_state(&p, 0.5).unwrap();
        let t = simulate(&p, &x0, &vec![0.0; 1000]).unwrap();
        let rel = ((t.soc_bulk[1000] - t.soc_bulk[0]) / t.soc_bulk[0]).abs();
        assert!(rel < 1e-9, "zero-current drift {rel:e}");
    }

    #[test]
    fn trajectory_csv_round_trips_exactly() {
        let p = params();
        let x0 = init_state(&p, 0.3).unwrap();
        let profile = vec![25.0; 5];
        let t = simulate(&p, &x0, &profile).unwrap();
        let mut buf = Vec::new();
        t.to_csv(&mut buf, 20).unwrap();
        let back = Trajectory::from_csv(buf.as_slice(), p.dt).unwrap();
        assert_eq!(back.times, t.times);
        assert_eq!(back.currents, t.currents);
        assert_eq!(back.voltages, t.voltages);
        assert_eq!(back.soc_bulk, t.soc_bulk);
        assert_eq!(back.soc_surf, t.soc_surf);
        assert_eq!(back.states, t.states);
    }
}
