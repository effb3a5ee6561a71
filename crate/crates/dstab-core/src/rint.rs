//! Low-fidelity Rint equivalent-circuit model and its identification from
//! plant trajectories.
//!
//! The model is a single state-of-charge integrator with an OCV curve and
//! a series resistance: soc advances by η·dt·I/Q_c and the terminal
//! voltage is h(soc) + R_0·I. Identification recovers capacity (from a
//! wide charge sweep), the OCV polynomial (from a quasi-static sweep) and
//! the resistance (from current-step edges) out of recorded trajectories.

use crate::error::{Error, Result};
use crate::ocv::Polynomial;
use crate::spm::Trajectory;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// Parameters of the Rint equivalent circuit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RintParams {
    /// Coulombic efficiency (dimensionless, 0 < η ≤ 1).
    pub eta: f64,
    /// Capacity in coulombs (ampere-seconds).
    pub q_c: f64,
    /// Internal resistance (Ω, against currents in amperes).
    pub r_0: f64,
    /// Open-circuit voltage as a polynomial over soc ∈ [0, 1].
    pub ocv: Polynomial,
    /// Electrode area (m²) converting the plant's current density to
    /// amperes.
    pub area: f64,
}

impl RintParams {
    /// Validates ranges; the OCV monotonicity audit is separate because a
    /// freshly identified curve may legitimately carry the warning flag.
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::InvalidParam(format!(
                "eta must lie in (0, 1], got {}",
                self.eta
            )));
        }
        if !(self.q_c > 0.0) || !self.q_c.is_finite() {
            return Err(Error::InvalidParam(format!(
                "q_c must be > 0, got {}",
                self.q_c
            )));
        }
        if self.r_0 < 0.0 || !self.r_0.is_finite() {
            return Err(Error::InvalidParam(format!(
                "r_0 must be >= 0, got {}",
                self.r_0
            )));
        }
        if !(self.area > 0.0) || !self.area.is_finite() {
            return Err(Error::InvalidParam(format!(
                "area must be > 0, got {}",
                self.area
            )));
        }
        Ok(())
    }

    /// Audit: OCV nondecreasing over [0, 1] sampled at 1e-3 resolution.
    pub fn ocv_is_monotone(&self) -> bool {
        self.ocv.is_monotone_on(0.0, 1.0, 1e-3)
    }

    /// Capacity in ampere-hours for reporting.
    pub fn q_c_ah(&self) -> f64 {
        self.q_c / 3600.0
    }
}

/// Equivalent-circuit state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcmState {
    /// State of charge (dimensionless).
    pub soc: f64,
    /// Previously applied current (A); controls are increments on it.
    pub i_prev: f64,
}

impl EcmState {
    /// Range audit: soc within [−tol, 1+tol], tol = 1e-6.
    pub fn soc_in_range(&self) -> bool {
        (-1e-6..=1.0 + 1e-6).contains(&self.soc)
    }
}

/// Advances the state of charge one step under the control increment
/// `delta_i` (A): soc′ = soc + (η·dt/Q_c)·(Δi + i_prev).
pub fn step_soc(state: &EcmState, delta_i: f64, params: &RintParams, dt: f64) -> EcmState {
    let i_total = state.i_prev + delta_i;
    EcmState {
        soc: state.soc + params.eta * dt / params.q_c * i_total,
        i_prev: i_total,
    }
}

/// Terminal voltage h(soc) + R_0·I. Out-of-range soc is clamped for the
/// OCV evaluation and flagged.
pub fn terminal_voltage(state: &EcmState, i_total: f64, params: &RintParams) -> (f64, bool) {
    let (soc, clamped) = if state.soc < 0.0 {
        (0.0, true)
    } else if state.soc > 1.0 {
        (1.0, true)
    } else {
        (state.soc, false)
    };
    (params.ocv.eval(soc) + params.r_0 * i_total, clamped)
}

/// Rolls the equivalent circuit under a profile of absolute currents (A),
/// recording the same trajectory schema as the plant (amperes in the
/// current column; concentration columns empty).
pub fn simulate_rint(
    params: &RintParams,
    x0: &EcmState,
    profile: &[f64],
    dt: f64,
) -> Result<Trajectory> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParam(format!("dt must be > 0, got {dt}")));
    }
    let mut traj = Trajectory {
        dt,
        times: Vec::with_capacity(profile.len() + 1),
        currents: Vec::with_capacity(profile.len() + 1),
        voltages: Vec::with_capacity(profile.len() + 1),
        soc_bulk: Vec::with_capacity(profile.len() + 1),
        soc_surf: Vec::with_capacity(profile.len() + 1),
        states: Vec::with_capacity(profile.len() + 1),
        clamp_flags: Vec::with_capacity(profile.len() + 1),
    };
    let mut state = *x0;
    let record = |k: usize, state: &EcmState, i_now: f64, traj: &mut Trajectory| {
        let (v, clamped) = terminal_voltage(state, i_now, params);
        traj.times.push(k as f64 * dt);
        traj.currents.push(i_now);
        traj.voltages.push(v);
        traj.soc_bulk.push(state.soc);
        traj.soc_surf.push(state.soc);
        traj.states.push(DVector::zeros(0));
        traj.clamp_flags.push(clamped);
    };
    for (k, &i_k) in profile.iter().enumerate() {
        record(k, &state, i_k, &mut traj);
        state = step_soc(&state, i_k - state.i_prev, params, dt);
    }
    let hold = profile.last().copied().unwrap_or(x0.i_prev);
    record(profile.len(), &state, hold, &mut traj);
    Ok(traj)
}

/// Capacity identification result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityFit {
    /// Capacity in coulombs.
    pub q_c: f64,
    /// Coulombic efficiency used (fixed, not identified).
    pub eta: f64,
    /// Relative residual of the Δsoc-vs-charge regression.
    pub rel_residual: f64,
    /// Width of the observed soc sweep.
    pub sweep_width: f64,
}

/// Identifies capacity from a wide soc sweep by regressing the soc rise
/// against the cumulative delivered charge (through the origin).
///
/// Trajectory currents are treated as densities (A/m²) and scaled by
/// `area` into amperes; pass `area = 1.0` for data already in amperes.
/// The coulombic efficiency is fixed at 1 (unidentifiable from a
/// charge-only sweep) and recorded.
pub fn identify_capacity(traj: &Trajectory, area: f64) -> Result<CapacityFit> {
    if traj.len() < 2 {
        return Err(Error::InsufficientExcitation(
            "capacity identification needs at least two samples".into(),
        ));
    }
    let (lo, hi) = traj
        .soc_bulk
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
            (lo.min(s), hi.max(s))
        });
    let width = hi - lo;
    if width < 0.5 {
        return Err(Error::InsufficientExcitation(format!(
            "soc sweep width {width:.3} is below the required 0.5"
        )));
    }
    let eta = 1.0;
    // Cumulative charge before each sample; currents[k] acts on [t_k, t_k+1).
    let mut charge = vec![0.0; traj.len()];
    for k in 1..traj.len() {
        charge[k] = charge[k - 1] + traj.currents[k - 1] * area * traj.dt;
    }
    let soc0 = traj.soc_bulk[0];
    let mut qq = 0.0;
    let mut qd = 0.0;
    let mut dd = 0.0;
    for k in 0..traj.len() {
        let d = traj.soc_bulk[k] - soc0;
        qq += charge[k] * charge[k];
        qd += charge[k] * d;
        dd += d * d;
    }
    if qq == 0.0 {
        return Err(Error::InsufficientExcitation(
            "no charge delivered over the trajectory".into(),
        ));
    }
    let slope = qd / qq;
    if !(slope > 0.0) {
        return Err(Error::InsufficientExcitation(format!(
            "soc change opposes delivered charge (slope {slope:e})"
        )));
    }
    let mut resid = 0.0;
    for k in 0..traj.len() {
        let e = (traj.soc_bulk[k] - soc0) - slope * charge[k];
        resid += e * e;
    }
    let rel_residual = if dd > 0.0 { (resid / dd).sqrt() } else { 0.0 };
    Ok(CapacityFit {
        q_c: eta / slope,
        eta,
        rel_residual,
        sweep_width: width,
    })
}

/// Open-circuit-voltage identification result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcvFit {
    pub ocv: Polynomial,
    /// RMS voltage residual of the fit (V).
    pub rms_v: f64,
    /// Nondecreasing over the observed soc range at 1e-3 resolution.
    pub monotone: bool,
    /// Observed soc range the audit covers.
    pub soc_range: (f64, f64),
}

/// Fits a polynomial OCV curve to voltage-vs-soc samples of a quasi-static
/// sweep and audits monotonicity over the observed range. A non-monotone
/// fit is returned with the warning flag set rather than rejected.
pub fn identify_ocv(traj: &Trajectory, degree: usize) -> Result<OcvFit> {
    if traj.len() < degree + 1 {
        return Err(Error::InsufficientExcitation(format!(
            "{} samples cannot determine a degree-{degree} polynomial",
            traj.len()
        )));
    }
    let (ocv, rms_v) = Polynomial::fit(&traj.soc_bulk, &traj.voltages, degree)?;
    let (lo, hi) = traj
        .soc_bulk
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
            (lo.min(s), hi.max(s))
        });
    let monotone = lo >= hi || ocv.is_monotone_on(lo, hi, 1e-3);
    Ok(OcvFit {
        ocv,
        rms_v,
        monotone,
        soc_range: (lo, hi),
    })
}

/// Internal-resistance identification result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct R0Fit {
    /// Resistance in volts per trajectory current unit (Ω when currents
    /// are amperes, Ω·m² when they are densities).
    pub r_0: f64,
    /// Number of qualifying current edges averaged.
    pub n_edges: usize,
    /// Spread (max − min) of the per-edge estimates.
    pub spread: f64,
}

/// Estimates the series resistance as the mean of ΔV/ΔI over current
/// steps of magnitude at least `pulse_threshold` (trajectory current
/// units).
pub fn identify_r0(traj: &Trajectory, pulse_threshold: f64) -> Result<R0Fit> {
    if !(pulse_threshold > 0.0) {
        return Err(Error::InvalidParam(format!(
            "pulse_threshold must be > 0, got {pulse_threshold}"
        )));
    }
    let mut samples = Vec::new();
    for k in 1..traj.len() {
        let di = traj.currents[k] - traj.currents[k - 1];
        if di.abs() >= pulse_threshold {
            samples.push((traj.voltages[k] - traj.voltages[k - 1]) / di);
        }
    }
    if samples.is_empty() {
        return Err(Error::InsufficientExcitation(format!(
            "no current step of magnitude >= {pulse_threshold} found"
        )));
    }
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let (lo, hi) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
            (lo.min(s), hi.max(s))
        });
    Ok(R0Fit {
        r_0: mean,
        n_edges: n,
        spread: hi - lo,
    })
}

/// Combined identification artifact consumed by the attack pipeline and
/// exported into reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationReport {
    pub capacity: CapacityFit,
    pub ocv: OcvFit,
    pub r0: R0Fit,
    /// Resistance converted to Ω (amperes convention).
    pub r_0_ohm: f64,
    /// Area used for the density → ampere conversion (m²).
    pub area: f64,
}

impl IdentificationReport {
    /// Assembles the identified parameters into a usable model.
    pub fn to_params(&self) -> RintParams {
        RintParams {
            eta: self.capacity.eta,
            q_c: self.capacity.q_c,
            r_0: self.r_0_ohm,
            ocv: self.ocv.ocv.clone(),
            area: self.area,
        }
    }

    /// Structured text summary: fitted values, residuals and excitation
    /// diagnostics.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("identified rint model\n");
        s.push_str(&format!(
            "  capacity: {:.6e} C ({:.4} Ah), eta = {} (fixed), regression residual {:.3e}, sweep width {:.3}\n",
            self.capacity.q_c,
            self.capacity.q_c / 3600.0,
            self.capacity.eta,
            self.capacity.rel_residual,
            self.capacity.sweep_width,
        ));
        s.push_str(&format!(
            "  ocv: degree {} polynomial, rms residual {:.3e} V, monotone over [{:.3}, {:.3}]: {}\n",
            self.ocv.ocv.degree(),
            self.ocv.rms_v,
            self.ocv.soc_range.0,
            self.ocv.soc_range.1,
            self.ocv.monotone,
        ));
        s.push_str(&format!(
            "  r0: {:.6e} ohm ({} edges, spread {:.3e}), area {} m^2\n",
            self.r_0_ohm, self.r0.n_edges, self.r0.spread, self.area,
        ));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spm;
    use approx::assert_relative_eq;

    fn params() -> RintParams {
        RintParams {
            eta: 1.0,
            q_c: 3600.0,
            r_0: 0.01,
            ocv: Polynomial::new(vec![3.0, 0.8]),
            area: 1.0,
        }
    }

    #[test]
    fn step_soc_hand_value() {
        let p = params();
        let s = EcmState {
            soc: 0.5,
            i_prev: 0.0,
        };
        let next = step_soc(&s, 36.0, &p, 1.0);
        assert_relative_eq!(next.soc, 0.51, max_relative = 1e-12);
        assert_eq!(next.i_prev, 36.0);
    }

    #[test]
    fn zero_increment_from_rest_leaves_soc_unchanged() {
        let p = params();
        let s = EcmState {
            soc: 0.42,
            i_prev: 0.0,
        };
        let next = step_soc(&s, 0.0, &p, 1.0);
        assert_eq!(next.soc, 0.42);
    }

    #[test]
    fn step_soc_is_symmetric_in_increment_and_held_current() {
        let p = params();
        let a = step_soc(
            &EcmState {
                soc: 0.3,
                i_prev: 7.0,
            },
            2.0,
            &p,
            1.0,
        );
        let b = step_soc(
            &EcmState {
                soc: 0.3,
                i_prev: 2.0,
            },
            7.0,
            &p,
            1.0,
        );
        assert_eq!(a.soc, b.soc);
    }

    #[test]
    fn voltage_decomposes_into_ocv_plus_ohmic_drop() {
        let p = params();
        let s = EcmState {
            soc: 0.5,
            i_prev: 0.0,
        };
        let (v0, c0) = terminal_voltage(&s, 0.0, &p);
        assert!(!c0);
        assert_relative_eq!(v0, p.ocv.eval(0.5), max_relative = 1e-14);
        let (v1, _) = terminal_voltage(&s, 1.0, &p);
        let (v2, _) = terminal_voltage(&s, 2.0, &p);
        assert_relative_eq!(v2 - v1, p.r_0, max_relative = 1e-12);

        let mut zero_r = p.clone();
        zero_r.r_0 = 0.0;
        let (va, _) = terminal_voltage(&s, 10.0, &zero_r);
        assert_eq!(va, zero_r.ocv.eval(0.5));
    }

    #[test]
    fn out_of_range_soc_clamps_with_flag() {
        let p = params();
        let (v, clamped) = terminal_voltage(
            &EcmState {
                soc: 1.3,
                i_prev: 0.0,
            },
            0.0,
            &p,
        );
        assert!(clamped);
        assert_relative_eq!(v, p.ocv.eval(1.0), max_relative = 1e-14);
        assert!(!EcmState {
            soc: 1.3,
            i_prev: 0.0
        }
        .soc_in_range());
        assert!(EcmState {
            soc: 1.0,
            i_prev: 0.0
        }
        .soc_in_range());
    }

    #[test]
    fn capacity_round_trips_on_synthetic_sweep() {
        let mut p = params();
        p.q_c = 7200.0;
        let x0 = EcmState {
            soc: 0.15,
            i_prev: 0.0,
        };
        // 36 A for 140 steps of 1 s sweeps 0.15 → 0.85.
        let profile = vec![36.0; 140];
        let traj = simulate_rint(&p, &x0, &profile, 1.0).unwrap();
        let fit = identify_capacity(&traj, 1.0).unwrap();
        assert!(
            ((fit.q_c - 7200.0) / 7200.0).abs() < 1e-3,
            "recovered {} C",
            fit.q_c
        );
        assert!(fit.rel_residual < 1e-10);
        assert_eq!(fit.eta, 1.0);
    }

    #[test]
    fn narrow_or_idle_sweeps_are_rejected() {
        let p = params();
        let x0 = EcmState {
            soc: 0.5,
            i_prev: 0.0,
        };
        let idle = simulate_rint(&p, &x0, &vec![0.0; 50], 1.0).unwrap();
        match identify_capacity(&idle, 1.0) {
            Err(Error::InsufficientExcitation(_)) => {}
            other => panic!("expected insufficient excitation, got {other:?}"),
        }
        let narrow = simulate_rint(&p, &x0, &vec![36.0; 20], 1.0).unwrap();
        assert!(matches!(
            identify_capacity(&narrow, 1.0),
            Err(Error::InsufficientExcitation(_))
        ));
    }

    #[test]
    fn spm_sweep_capacity_matches_the_analytic_value() {
        let sp = spm::SpmParams::default();
        let x0 = spm::init_state(&sp, 0.15).unwrap();
        // 40 A/m² to ~0.85 bulk soc: rate = coulomb_rate_per_step.
        let rate = spm::coulomb_rate_per_step(&sp, 40.0);
        let steps = (0.70 / rate).ceil() as usize;
        let traj = spm::simulate(&sp, &x0, &vec![40.0; steps]).unwrap();
        let area = 1.0;
        let fit = identify_capacity(&traj, area).unwrap();
        let analytic = sp.faraday
            * sp.anode.a_s
            * sp.anode.thickness
            * sp.r_s
            * sp.anode.c_max
            * area
            / 3.0;
        assert!(
            ((fit.q_c - analytic) / analytic).abs() < 1e-2,
            "fit {} vs analytic {}",
            fit.q_c,
            analytic
        );
    }

    #[test]
    fn ocv_round_trips_exactly_on_noiseless_samples() {
        let truth = Polynomial::new(vec![3.2, 0.9, -0.3, 0.1]);
        let mut traj = simulate_rint(
            &params(),
            &EcmState {
                soc: 0.0,
                i_prev: 0.0,
            },
            &[],
            1.0,
        )
        .unwrap();
        traj.times.clear();
        traj.currents.clear();
        traj.voltages.clear();
        traj.soc_bulk.clear();
        traj.soc_surf.clear();
        traj.states.clear();
        traj.clamp_flags.clear();
        for k in 0..=100 {
            let s = k as f64 / 100.0;
            traj.times.push(k as f64);
            traj.currents.push(0.0);
            traj.voltages.push(truth.eval(s));
            traj.soc_bulk.push(s);
            traj.soc_surf.push(s);
            traj.states.push(DVector::zeros(0));
            traj.clamp_flags.push(false);
        }
        let fit = identify_ocv(&traj, 3).unwrap();
        for (a, b) in fit.ocv.coeffs.iter().zip(truth.coeffs.iter()) {
            assert!((a - b).abs() < 1e-8, "coefficient {a} vs {b}");
        }
        assert!(fit.rms_v < 1e-8);
        assert!(fit.monotone);
    }

    #[test]
    fn degree_zero_fit_on_flat_data_is_the_constant() {
        let mut p = params();
        p.ocv = Polynomial::constant(3.7);
        p.r_0 = 0.0;
        let traj = simulate_rint(
            &p,
            &EcmState {
                soc: 0.2,
                i_prev: 0.0,
            },
            &vec![10.0; 50],
            1.0,
        )
        .unwrap();
        let fit = identify_ocv(&traj, 0).unwrap();
        assert_relative_eq!(fit.ocv.coeffs[0], 3.7, max_relative = 1e-12);
        assert!(fit.rms_v < 1e-12);
    }

    #[test]
    fn spm_quasi_static_sweep_fits_under_five_millivolts() {
        let sp = spm::SpmParams::default();
        let x0 = spm::init_state(&sp, 0.15).unwrap();
        let rate = spm::coulomb_rate_per_step(&sp, 1.6);
        let steps = (0.70 / rate).ceil() as usize;
        let traj = spm::simulate(&sp, &x0, &vec![1.6; steps]).unwrap();
        let fit = identify_ocv(&traj, 7).unwrap();
        assert!(
            fit.rms_v < 5e-3,
            "quasi-static fit rms {} V exceeds 5 mV",
            fit.rms_v
        );
        assert!(fit.monotone, "identified OCV must be monotone");
    }

    #[test]
    fn r0_round_trips_on_flat_ocv_pulses() {
        let mut p = params();
        p.r_0 = 0.010;
        p.ocv = Polynomial::constant(3.6);
        let mut profile = Vec::new();
        for _ in 0..5 {
            profile.extend_from_slice(&[0.0; 20]);
            profile.extend_from_slice(&[30.0; 20]);
        }
        let traj = simulate_rint(
            &p,
            &EcmState {
                soc: 0.4,
                i_prev: 0.0,
            },
            &profile,
            1.0,
        )
        .unwrap();
        let fit = identify_r0(&traj, 10.0).unwrap();
        assert!(
            ((fit.r_0 - 0.010) / 0.010).abs() < 1e-6,
            "recovered {} ohm over {} edges",
            fit.r_0,
            fit.n_edges
        );
        assert!(fit.n_edges >= 9);
    }

    #[test]
    fn pulse_free_profiles_cannot_identify_r0() {
        let p = params();
        let traj = simulate_rint(
            &p,
            &EcmState {
                soc: 0.4,
                i_prev: 0.0,
            },
            &vec![5.0; 40],
            1.0,
        )
        .unwrap();
        assert!(matches!(
            identify_r0(&traj, 10.0),
            Err(Error::InsufficientExcitation(_))
        ));
    }

    #[test]
    fn spm_pulse_train_yields_a_positive_resistance() {
        let sp = spm::SpmParams::default();
        let x0 = spm::init_state(&sp, 0.5).unwrap();
        let mut profile = Vec::new();
        for _ in 0..4 {
            profile.extend_from_slice(&[0.0; 60]);
            profile.extend_from_slice(&[30.0; 30]);
        }
        profile.extend_from_slice(&[0.0; 60]);
        let traj = spm::simulate(&sp, &x0, &profile).unwrap();
        let fit = identify_r0(&traj, 10.0).unwrap();
        assert!(fit.r_0 > 0.0, "pulse train gave r0 = {}", fit.r_0);
        // The plant's series resistance dominates the edge response.
        assert_relative_eq!(fit.r_0, sp.r_lump, max_relative = 0.25);
    }

    #[test]
    fn identification_report_assembles_and_prints() {
        let report = IdentificationReport {
            capacity: CapacityFit {
                q_c: 1.4e5,
                eta: 1.0,
                rel_residual: 1e-12,
                sweep_width: 0.7,
            },
            ocv: OcvFit {
                ocv: Polynomial::new(vec![3.0, 1.0]),
                rms_v: 1e-4,
                monotone: true,
                soc_range: (0.15, 0.85),
            },
            r0: R0Fit {
                r_0: 2e-3,
                n_edges: 8,
                spread: 1e-6,
            },
            r_0_ohm: 2e-3,
            area: 1.0,
        };
        let p = report.to_params();
        p.validate().unwrap();
        assert!(p.ocv_is_monotone());
        let text = report.to_text();
        assert!(text.contains("Ah"));
        assert!(text.contains("rms residual"));
        assert!(text.contains("edges"));
    }

    #[test]
    fn simulate_rint_records_aligned_columns() {
        let p = params();
        let traj = simulate_rint(
            &p,
            &EcmState {
                soc: 0.2,
                i_prev: 0.0,
            },
            &vec![18.0; 10],
            1.0,
        )
        .unwrap();
        assert_eq!(traj.len(), 11);
        assert_relative_eq!(
            traj.soc_bulk[10] - traj.soc_bulk[0],
            18.0 * 10.0 / p.q_c,
            max_relative = 1e-12
        );
        let mut buf = Vec::new();
        traj.to_csv(&mut buf, 0).unwrap();
        let back = Trajectory::from_csv(buf.as_slice(), 1.0).unwrap();
        assert_eq!(back.soc_bulk, traj.soc_bulk);
    }
}
