//! Attack levels, satisfaction evaluation, stealth audit, level
//! comparison, and the staged end-to-end pipeline.
//!
//! The pipeline runs six stages: excite the plant and record trajectories,
//! identify the equivalent-circuit model from the records, run the
//! adversarial high-fidelity controller in closed loop to obtain a target
//! control sequence, fit low-fidelity cost weights that reproduce it (and
//! a benign baseline), deploy both controllers on the plant, and evaluate
//! gap satisfaction and stealth. Stage failures carry the stage name and
//! leave the artifacts produced so far on disk.

use crate::error::{Error, Result};
use crate::inverse::{fit_theta, Anchoring, FitReport, FitSchedule, FitScenario, ThetaParams};
use crate::mpc::builders::{build_high_fidelity_problem, build_low_fidelity_problem, Limits};
use crate::mpc::receding::{receding_horizon, Plant, RecedingOutcome, SpmPlant, SpmView};
use crate::rint::{
    self, identify_capacity, identify_ocv, identify_r0, EcmState, IdentificationReport,
    RintParams,
};
use crate::spm::{self, SpmParams, SpmState, Trajectory};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Strength of the adversarial concentration-gradient constraint
/// surf − bulk ≥ γ₁·bulk + γ₂.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackLevel {
    pub gamma1: f64,
    pub gamma2: f64,
    pub label: LevelLabel,
}

/// Named strength presets plus a free-form escape hatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelLabel {
    Low,
    Medium,
    High,
    Custom,
}

impl AttackLevel {
    pub fn low() -> Self {
        Self {
            gamma1: 1e-2,
            gamma2: 5e-4,
            label: LevelLabel::Low,
        }
    }

    pub fn medium() -> Self {
        Self {
            gamma1: 4e-2,
            gamma2: 1e-3,
            label: LevelLabel::Medium,
        }
    }

    pub fn high() -> Self {
        Self {
            gamma1: 8e-2,
            gamma2: 2e-3,
            label: LevelLabel::High,
        }
    }

    pub fn custom(gamma1: f64, gamma2: f64) -> Self {
        Self {
            gamma1,
            gamma2,
            label: LevelLabel::Custom,
        }
    }

    /// Parses a preset name (low/medium/high).
    pub fn from_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "low" => Some(Self::low()),
            "medium" => Some(Self::medium()),
            "high" => Some(Self::high()),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.label {
            LevelLabel::Low => "low",
            LevelLabel::Medium => "medium",
            LevelLabel::High => "high",
            LevelLabel::Custom => "custom",
        }
    }

    pub fn is_valid(&self) -> bool {
        self.gamma1 >= 0.0
            && self.gamma2 >= 0.0
            && self.gamma1.is_finite()
            && self.gamma2.is_finite()
    }
}

/// Per-sample slack of the gap condition: surf − bulk − (γ₁·bulk + γ₂).
/// Nonnegative entries are satisfied samples.
pub fn satisfaction_margins(traj: &Trajectory, gamma: &AttackLevel) -> Vec<f64> {
    traj.soc_surf
        .iter()
        .zip(&traj.soc_bulk)
        .map(|(&surf, &bulk)| surf - bulk - (gamma.gamma1 * bulk + gamma.gamma2))
        .collect()
}

/// Evaluates the gap condition surf − bulk ≥ γ₁·bulk + γ₂ at every sample
/// of a plant trajectory. Returns the per-sample booleans and their count.
pub fn evaluate_satisfaction(traj: &Trajectory, gamma: &AttackLevel) -> (Vec<bool>, usize) {
    let flags: Vec<bool> = satisfaction_margins(traj, gamma)
        .into_iter()
        .map(|m| m >= 0.0)
        .collect();
    let count = flags.iter().filter(|&&b| b).count();
    (flags, count)
}

/// Which operating limit a stealth violation breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StealthConstraint {
    Soc,
    Current,
    Voltage,
}

impl std::fmt::Display for StealthConstraint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StealthConstraint::Soc => write!(f, "soc"),
            StealthConstraint::Current => write!(f, "current"),
            StealthConstraint::Voltage => write!(f, "voltage"),
        }
    }
}

/// One broken operating limit on the defender's model view: which sample,
/// which limit, and by how much (amount above the bound, in the bound's
/// units).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StealthViolation {
    pub step: usize,
    pub constraint: StealthConstraint,
    pub margin: f64,
}

/// Numerical dust allowance for the audit, relative to each bound.
const AUDIT_REL_TOL: f64 = 1e-6;

/// Replays the defender's view of a run and reports every broken limit.
///
/// The trajectory's currents must be in amperes. The audit coulomb-counts
/// the state of charge from the first recorded soc with the identified
/// capacity, evaluates the circuit voltage h(soc) + R₀·I, and checks
/// soc ≤ soc_max, I ≤ I_max·area, and V ≤ V_max at every sample. Bounds
/// get a 1e-6 relative tolerance so solver-precision dust does not flag.
pub fn stealth_audit(
    traj: &Trajectory,
    rint: &RintParams,
    limits: &Limits,
) -> Vec<StealthViolation> {
    let mut out = Vec::new();
    if traj.is_empty() {
        return out;
    }
    let i_max_amps = limits.i_max * rint.area;
    let tol = |bound: f64| AUDIT_REL_TOL * bound.abs().max(1.0);
    let mut soc = traj.soc_bulk[0];
    for step in 0..traj.len() {
        let i_k = traj.currents[step];
        let soc_excess = soc - limits.soc_max;
        if soc_excess > tol(limits.soc_max) {
            out.push(StealthViolation {
                step,
                constraint: StealthConstraint::Soc,
                margin: soc_excess,
            });
        }
        let i_excess = i_k - i_max_amps;
        if i_excess > tol(i_max_amps) {
            out.push(StealthViolation {
                step,
                constraint: StealthConstraint::Current,
                margin: i_excess,
            });
        }
        let v = rint.ocv.eval(soc.clamp(0.0, 1.0)) + rint.r_0 * i_k;
        let v_excess = v - limits.v_max;
        if v_excess > tol(limits.v_max) {
            out.push(StealthViolation {
                step,
                constraint: StealthConstraint::Voltage,
                margin: v_excess,
            });
        }
        if step + 1 < traj.len() {
            soc += rint.eta * traj.dt / rint.q_c * i_k;
        }
    }
    out
}

/// Identity of everything in a pipeline run except the attack level, used
/// to check that reports being compared came from the same setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigFingerprint {
    pub horizon: usize,
    pub t_steps: usize,
    pub substeps: usize,
    pub seed: u64,
    pub soc0: f64,
    pub area: f64,
    pub v_backoff: f64,
    pub theta_h: (f64, f64),
    pub theta0: (f64, f64),
    pub fit_alpha: f64,
    pub fit_max_iters: usize,
    pub fit_tol: f64,
    pub slack_weight: Option<f64>,
    pub limits: Limits,
    pub spm_dt: f64,
    pub spm_nodes: usize,
}

/// Everything the staged pipeline needs for one attack level.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Plant parameters.
    pub spm: SpmParams,
    /// Operating limits in plant units (current as density).
    pub limits: Limits,
    /// Adversarial constraint strength.
    pub gamma: AttackLevel,
    /// Prediction horizon N of both controllers.
    pub horizon: usize,
    /// Closed-loop control periods T of the adversarial run and the
    /// deployments.
    pub t_steps: usize,
    /// Plant steps per control period.
    pub substeps: usize,
    /// Cost weights (q, r) of the adversarial high-fidelity controller.
    pub theta_h: (f64, f64),
    /// Initial anode state of charge of the charging task.
    pub soc0: f64,
    /// Electrode area (m²) converting current density to amperes.
    pub area: f64,
    /// Voltage margin subtracted from v_max inside the controllers so that
    /// within-period excursions stay under the audited bound.
    pub v_backoff: f64,
    /// Weight-fitting schedule shared by the nominal and attack fits.
    pub fit: FitSchedule,
    /// Fit starting point.
    pub theta0: ThetaParams,
    /// Pre-softens the adversarial gap rows at this quadratic penalty
    /// instead of the solver's retry-on-infeasible default.
    pub slack_weight: Option<f64>,
    /// Skips excitation and identification when provided.
    pub rint_override: Option<RintParams>,
    /// Recorded for reproducibility bookkeeping; the pipeline itself is
    /// deterministic.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            spm: SpmParams::default(),
            limits: Limits::default(),
            gamma: AttackLevel::low(),
            horizon: 10,
            t_steps: 200,
            substeps: 10,
            theta_h: (1.0, 1e-3),
            soc0: 0.25,
            area: 1.0,
            v_backoff: 0.01,
            fit: FitSchedule::default(),
            theta0: ThetaParams::new(1.0, 1.0),
            slack_weight: None,
            rint_override: None,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.spm.validate()?;
        self.limits.validate()?;
        if !self.gamma.is_valid() {
            return Err(Error::InvalidParam(format!(
                "gamma must be finite and nonnegative, got ({}, {})",
                self.gamma.gamma1, self.gamma.gamma2
            )));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidParam("horizon must be at least 1".into()));
        }
        if self.t_steps < self.horizon {
            return Err(Error::InvalidParam(format!(
                "t_steps ({}) must be at least the horizon ({})",
                self.t_steps, self.horizon
            )));
        }
        if self.substeps == 0 {
            return Err(Error::InvalidParam("substeps must be at least 1".into()));
        }
        if !(self.soc0 > 0.0 && self.soc0 < 1.0) {
            return Err(Error::InvalidParam(format!(
                "soc0 must lie in (0, 1), got {}",
                self.soc0
            )));
        }
        if self.soc0 >= self.limits.soc_d {
            return Err(Error::InvalidParam(format!(
                "soc0 ({}) must start below the charging target soc_d ({})",
                self.soc0, self.limits.soc_d
            )));
        }
        if !(self.area > 0.0) || !self.area.is_finite() {
            return Err(Error::InvalidParam(format!(
                "area must be > 0, got {}",
                self.area
            )));
        }
        if !(0.0..self.limits.v_max).contains(&self.v_backoff) {
            return Err(Error::InvalidParam(format!(
                "v_backoff must lie in [0, v_max), got {}",
                self.v_backoff
            )));
        }
        let (q_h, r_h) = self.theta_h;
        if q_h < 0.0 || r_h < 0.0 || q_h + r_h <= 0.0 || !q_h.is_finite() || !r_h.is_finite() {
            return Err(Error::InvalidParam(format!(
                "theta_h requires q, r >= 0 with q + r > 0, got ({q_h}, {r_h})"
            )));
        }
        self.theta0.validate()?;
        if let Some(w) = self.slack_weight {
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::InvalidParam(format!(
                    "slack_weight must be > 0, got {w}"
                )));
            }
        }
        if let Some(r) = &self.rint_override {
            r.validate()?;
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> ConfigFingerprint {
        ConfigFingerprint {
            horizon: self.horizon,
            t_steps: self.t_steps,
            substeps: self.substeps,
            seed: self.seed,
            soc0: self.soc0,
            area: self.area,
            v_backoff: self.v_backoff,
            theta_h: self.theta_h,
            theta0: (self.theta0.q, self.theta0.r),
            fit_alpha: self.fit.alpha,
            fit_max_iters: self.fit.max_iters,
            fit_tol: self.fit.tol,
            slack_weight: self.slack_weight,
            limits: self.limits,
            spm_dt: self.spm.dt,
            spm_nodes: self.spm.n_nodes,
        }
    }
}

/// Everything one attack-level run produced.
#[derive(Debug)]
pub struct AttackReport {
    pub level: AttackLevel,
    /// Identified (or overridden) defender model.
    pub rint: RintParams,
    /// Adversarial control increments in amperes, one per control period.
    pub u_adv: Vec<f64>,
    /// Fitted compromised weights.
    pub theta_star: ThetaParams,
    /// Weights fitted to the benign fast-charge reference.
    pub theta_nominal: ThetaParams,
    /// Plant run under the nominal controller (currents as density).
    pub nominal_traj: Trajectory,
    /// Plant run under the compromised controller (currents as density).
    pub compromised_traj: Trajectory,
    /// Per-sample gap condition on the compromised run.
    pub satisfaction: Vec<bool>,
    pub satisfied_count: usize,
    /// Gap-condition count of the nominal baseline at the same level.
    pub nominal_satisfied_count: usize,
    /// Broken limits of the compromised run on the defender's view.
    pub stealth_violations: Vec<StealthViolation>,
    /// Broken limits of the nominal run on the defender's view.
    pub nominal_stealth_violations: Vec<StealthViolation>,
    /// Fit of the compromised weights to the adversarial controls.
    pub fit: FitReport,
    /// Final loss of the benign baseline fit.
    pub nominal_fit_loss: f64,
    pub fingerprint: ConfigFingerprint,
}

impl AttackReport {
    /// Readable run summary.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "attack level: {} (gamma1 = {}, gamma2 = {})\n",
            self.level.name(),
            self.level.gamma1,
            self.level.gamma2
        ));
        s.push_str(&format!(
            "defender model: q_c = {:.6e} C, r_0 = {:.6e} ohm, ocv degree {}\n",
            self.rint.q_c,
            self.rint.r_0,
            self.rint.ocv.degree()
        ));
        s.push_str(&format!(
            "theta_nominal: q = {:.6}, r = {:.6} (ratio {:.4}), reference fit loss {:.3e}\n",
            self.theta_nominal.q,
            self.theta_nominal.r,
            self.theta_nominal.ratio(),
            self.nominal_fit_loss
        ));
        s.push_str(&format!(
            "theta_star: q = {:.6}, r = {:.6} (ratio {:.4}), fit loss {:.3e}, status {:?}\n",
            self.theta_star.q,
            self.theta_star.r,
            self.theta_star.ratio(),
            self.fit.final_loss(),
            self.fit.status
        ));
        let total = self.satisfaction.len();
        s.push_str(&format!(
            "gap satisfaction: compromised {} / {} samples, nominal {} / {}\n",
            self.satisfied_count, total, self.nominal_satisfied_count, total
        ));
        s.push_str(&format!(
            "stealth violations: compromised {}, nominal {}\n",
            self.stealth_violations.len(),
            self.nominal_stealth_violations.len()
        ));
        if let (Some(&c), Some(&n)) = (
            self.compromised_traj.soc_bulk.last(),
            self.nominal_traj.soc_bulk.last(),
        ) {
            s.push_str(&format!(
                "final bulk soc: compromised {c:.4}, nominal {n:.4}\n"
            ));
        }
        s
    }

    /// CSV of the gap condition per sample of the compromised run.
    pub fn satisfaction_csv(&self) -> String {
        let mut s = String::from("step,surf,bulk,threshold,satisfied\n");
        for k in 0..self.compromised_traj.len() {
            let bulk = self.compromised_traj.soc_bulk[k];
            let surf = self.compromised_traj.soc_surf[k];
            let threshold = self.level.gamma1 * bulk + self.level.gamma2;
            s.push_str(&format!(
                "{k},{surf},{bulk},{threshold},{}\n",
                self.satisfaction[k]
            ));
        }
        s
    }

    /// CSV of every broken limit in both deployments.
    pub fn stealth_csv(&self) -> String {
        let mut s = String::from("run,step,constraint,margin\n");
        for (run, list) in [
            ("nominal", &self.nominal_stealth_violations),
            ("compromised", &self.stealth_violations),
        ] {
            for v in list.iter() {
                s.push_str(&format!("{run},{},{},{}\n", v.step, v.constraint, v.margin));
            }
        }
        s
    }

    /// CSV of the adversarial control increments and the resulting held
    /// current, in amperes.
    pub fn u_adv_csv(&self) -> String {
        let mut s = String::from("step,delta_i_A,current_A\n");
        let mut held = 0.0;
        for (k, &du) in self.u_adv.iter().enumerate() {
            held += du;
            s.push_str(&format!("{k},{du},{held}\n"));
        }
        s
    }

    /// Writes the report as a directory of artifacts: text summary,
    /// trajectory CSVs, satisfaction CSV, stealth CSV, fit history, and
    /// the adversarial control sequence.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("summary.txt"), self.to_text())?;
        let n_conc = self
            .compromised_traj
            .states
            .first()
            .map(|s| s.len())
            .unwrap_or(0);
        write_traj_csv(dir, "compromised.csv", &self.compromised_traj, n_conc)?;
        write_traj_csv(dir, "nominal.csv", &self.nominal_traj, n_conc)?;
        fs::write(dir.join("satisfaction.csv"), self.satisfaction_csv())?;
        fs::write(dir.join("stealth_violations.csv"), self.stealth_csv())?;
        fs::write(dir.join("fit_history.csv"), self.fit.history_csv())?;
        fs::write(dir.join("u_adv.csv"), self.u_adv_csv())?;
        Ok(())
    }
}

/// One line of a level comparison.
#[derive(Debug, Clone)]
pub struct LevelRow {
    pub level: AttackLevel,
    pub satisfied_count: usize,
    /// Mean of the positive gap margins of the compromised run (0 when no
    /// sample satisfied the condition).
    pub mean_positive_margin: f64,
    pub fit_loss: f64,
}

/// Side-by-side view of several levels run from one configuration.
#[derive(Debug, Clone)]
pub struct LevelComparison {
    /// Rows in ascending gamma order.
    pub rows: Vec<LevelRow>,
    /// Whether satisfied counts are non-increasing as gamma grows.
    pub satisfaction_monotone: bool,
}

impl LevelComparison {
    pub fn to_text(&self) -> String {
        let mut s = String::from(
            "level     gamma1     gamma2     satisfied  mean_margin   fit_loss\n",
        );
        for row in &self.rows {
            s.push_str(&format!(
                "{:<8}  {:<9}  {:<9}  {:<9}  {:<11.4e}  {:.4e}\n",
                row.level.name(),
                row.level.gamma1,
                row.level.gamma2,
                row.satisfied_count,
                row.mean_positive_margin,
                row.fit_loss
            ));
        }
        s.push_str(&format!(
            "satisfaction monotone in gamma: {}\n",
            self.satisfaction_monotone
        ));
        s
    }
}

/// Compares reports produced by the same configuration at different attack
/// levels. Rejects fewer than two reports and reports whose configurations
/// disagree in anything but the level.
pub fn compare_levels(reports: &[AttackReport]) -> Result<LevelComparison> {
    if reports.len() < 2 {
        return Err(Error::BadInput(format!(
            "level comparison needs at least two reports, got {}",
            reports.len()
        )));
    }
    for r in &reports[1..] {
        if r.fingerprint != reports[0].fingerprint {
            return Err(Error::ReportMismatch(format!(
                "reports disagree outside the attack level: {:?} vs {:?}",
                reports[0].fingerprint, r.fingerprint
            )));
        }
    }
    let mut rows: Vec<LevelRow> = reports
        .iter()
        .map(|r| {
            let margins = satisfaction_margins(&r.compromised_traj, &r.level);
            let positive: Vec<f64> = margins.into_iter().filter(|&m| m >= 0.0).collect();
            let mean_positive_margin = if positive.is_empty() {
                0.0
            } else {
                positive.iter().sum::<f64>() / positive.len() as f64
            };
            LevelRow {
                level: r.level,
                satisfied_count: r.satisfied_count,
                mean_positive_margin,
                fit_loss: r.fit.final_loss(),
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        (a.level.gamma1, a.level.gamma2)
            .partial_cmp(&(b.level.gamma1, b.level.gamma2))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let satisfaction_monotone = rows
        .windows(2)
        .all(|w| w[0].satisfied_count >= w[1].satisfied_count);
    Ok(LevelComparison {
        rows,
        satisfaction_monotone,
    })
}

/// Recorded excitation runs feeding the identification stage.
#[derive(Debug, Clone)]
pub struct ExcitationRecord {
    /// Slow wide charge sweep (capacity and OCV source).
    pub sweep: Trajectory,
    /// Current pulse train around mid soc (resistance source).
    pub pulses: Trajectory,
}

/// Sweep current density (≈ C/10 for the stock cell).
const SWEEP_CURRENT: f64 = 4.0;
const SWEEP_SOC_LO: f64 = 0.15;
const SWEEP_SOC_HI: f64 = 0.85;
/// Pulse amplitude for the resistance edges.
const PULSE_CURRENT: f64 = 24.0;
/// Current-edge size that qualifies as a resistance pulse.
const R0_PULSE_THRESHOLD: f64 = 10.0;
/// Degree of the identified OCV polynomial.
pub const OCV_FIT_DEGREE: usize = 7;

/// Runs the excitation protocol on the plant: a slow charge sweep across
/// most of the soc range, then a rest/pulse train around mid soc.
pub fn run_excitation(params: &SpmParams) -> Result<ExcitationRecord> {
    let rate = spm::coulomb_rate_per_step(params, SWEEP_CURRENT);
    let steps = ((SWEEP_SOC_HI - SWEEP_SOC_LO) / rate).ceil() as usize;
    let x0 = spm::init_state(params, SWEEP_SOC_LO)?;
    let sweep = spm::simulate(params, &x0, &vec![SWEEP_CURRENT; steps])?;

    let mut profile = vec![0.0; 30];
    for _ in 0..3 {
        profile.extend(std::iter::repeat_n(PULSE_CURRENT, 30));
        profile.extend(std::iter::repeat_n(0.0, 30));
        profile.extend(std::iter::repeat_n(-PULSE_CURRENT, 30));
        profile.extend(std::iter::repeat_n(0.0, 30));
    }
    let xp = spm::init_state(params, 0.5)?;
    let pulses = spm::simulate(params, &xp, &profile)?;
    Ok(ExcitationRecord { sweep, pulses })
}

/// Identifies the full equivalent-circuit model from excitation records:
/// capacity and OCV from the sweep, resistance from the pulse edges.
pub fn identify_from_records(
    rec: &ExcitationRecord,
    area: f64,
    ocv_degree: usize,
) -> Result<IdentificationReport> {
    if !(area > 0.0) || !area.is_finite() {
        return Err(Error::InvalidParam(format!(
            "area must be > 0, got {area}"
        )));
    }
    let capacity = identify_capacity(&rec.sweep, area)?;
    let ocv = identify_ocv(&rec.sweep, ocv_degree)?;
    let r0 = identify_r0(&rec.pulses, R0_PULSE_THRESHOLD)?;
    let r_0_ohm = r0.r_0 / area;
    Ok(IdentificationReport {
        capacity,
        ocv,
        r0,
        r_0_ohm,
        area,
    })
}

/// How many control periods ahead the benign reference aims its taper.
const REFERENCE_TAPER: f64 = 3.0;

/// Benign fast-charge reference on the identified circuit model: full
/// current, tapering geometrically into the target and clipped to the
/// voltage limit. Returns the control increments (A) and the (soc, held
/// current) state at each decision.
fn benign_reference(
    rint: &RintParams,
    limits: &Limits,
    soc0: f64,
    dt_ctrl: f64,
    t_steps: usize,
) -> (Vec<f64>, Vec<(f64, f64)>) {
    let i_max_amps = limits.i_max * rint.area;
    let mut soc = soc0;
    let mut i_prev = 0.0;
    let mut u = Vec::with_capacity(t_steps);
    let mut anchors = Vec::with_capacity(t_steps);
    for _ in 0..t_steps {
        anchors.push((soc, i_prev));
        let room = (limits.soc_d - soc).max(0.0);
        let mut i_des =
            (room * rint.q_c / (rint.eta * dt_ctrl * REFERENCE_TAPER)).min(i_max_amps);
        if rint.r_0 > 1e-12 {
            let v_room = (limits.v_max - rint.ocv.eval(soc.clamp(0.0, 1.0))) / rint.r_0;
            i_des = i_des.min(v_room.max(0.0));
        }
        u.push(i_des - i_prev);
        soc += rint.eta * dt_ctrl / rint.q_c * i_des;
        i_prev = i_des;
    }
    (u, anchors)
}

/// Plant wrapper for deployment: currents drive the particle model while
/// the controller observes the defender's own coulomb-counted circuit
/// state, exactly the view the stealth audit replays.
struct ShadowedSpmPlant {
    inner: SpmPlant,
    shadow: EcmState,
    rint: RintParams,
    dt_ctrl: f64,
}

impl Plant for ShadowedSpmPlant {
    fn observe(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.shadow.soc, self.shadow.i_prev])
    }

    fn apply(&mut self, u0: &DVector<f64>) -> Result<()> {
        self.inner.apply(u0)?;
        self.shadow = rint::step_soc(&self.shadow, u0[0], &self.rint, self.dt_ctrl);
        Ok(())
    }

    fn trajectory(&self) -> Trajectory {
        self.inner.trajectory()
    }
}

fn write_traj_csv(dir: &Path, name: &str, traj: &Trajectory, n_conc: usize) -> Result<()> {
    let mut buf = Vec::new();
    traj.to_csv(&mut buf, n_conc)?;
    fs::write(dir.join(name), buf)?;
    Ok(())
}

/// Closed loop of the low-fidelity controller at `theta` against the
/// particle plant, observed through the defender's circuit model.
fn deploy_theta(
    config: &PipelineConfig,
    rint: &RintParams,
    limits: &Limits,
    theta: &ThetaParams,
    x_init: &SpmState,
    bulk0: f64,
) -> Result<RecedingOutcome> {
    let dt_ctrl = config.substeps as f64 * config.spm.dt;
    let mut plant = ShadowedSpmPlant {
        inner: SpmPlant::new(
            config.spm.clone(),
            x_init.clone(),
            config.substeps,
            SpmView::LowFidelity { area: rint.area },
        )?,
        shadow: EcmState {
            soc: bulk0,
            i_prev: 0.0,
        },
        rint: rint.clone(),
        dt_ctrl,
    };
    receding_horizon(
        |_t, z| {
            build_low_fidelity_problem(
                rint,
                (theta.q, theta.r),
                limits,
                z[0],
                z[1],
                config.horizon,
                dt_ctrl,
            )
        },
        &mut plant,
        config.t_steps,
    )
}

/// Runs the full staged pipeline for one attack level: excitation,
/// identification, the adversarial closed loop, weight fitting (benign
/// baseline and attack), deployment of both controllers, and evaluation.
///
/// When `out_dir` is given, artifacts are written as stages complete, so a
/// stage failure leaves everything produced so far on disk. Errors carry
/// the failing stage's name.
pub fn run_dstab(config: &PipelineConfig, out_dir: Option<&Path>) -> Result<AttackReport> {
    config.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let spm_params = &config.spm;
    let dt_ctrl = config.substeps as f64 * spm_params.dt;
    let ctrl_limits = Limits {
        v_max: config.limits.v_max - config.v_backoff,
        ..config.limits
    };

    // Stages 1 and 2: excitation and identification (or the override).
    let rint = match &config.rint_override {
        Some(r) => {
            r.validate().map_err(|e| e.in_stage("identification"))?;
            r.clone()
        }
        None => {
            let rec = run_excitation(spm_params).map_err(|e| e.in_stage("excitation"))?;
            if let Some(dir) = out_dir {
                write_traj_csv(dir, "excitation_sweep.csv", &rec.sweep, 0)
                    .and_then(|_| write_traj_csv(dir, "excitation_pulses.csv", &rec.pulses, 0))
                    .map_err(|e| e.in_stage("excitation"))?;
            }
            let ident = identify_from_records(&rec, config.area, OCV_FIT_DEGREE)
                .map_err(|e| e.in_stage("identification"))?;
            if let Some(dir) = out_dir {
                fs::write(dir.join("identification.txt"), ident.to_text())
                    .map_err(|e| Error::from(e).in_stage("identification"))?;
            }
            ident.to_params()
        }
    };

    // Stage 3: adversarial high-fidelity closed loop on the plant.
    let x_init = spm::init_state(spm_params, config.soc0).map_err(|e| e.in_stage("adversarial-mpc"))?;
    let bulk0 = spm::bulk_soc(spm_params, &x_init.conc);
    let dim = 2 * spm_params.n_nodes;
    let mut adv_plant = SpmPlant::new(
        spm_params.clone(),
        x_init.clone(),
        config.substeps,
        SpmView::HighFidelity,
    )
    .map_err(|e| e.in_stage("adversarial-mpc"))?;
    let adv = receding_horizon(
        |_t, z| {
            let problem = build_high_fidelity_problem(
                spm_params,
                config.theta_h,
                config.gamma,
                &ctrl_limits,
                &z.rows(0, dim).into_owned(),
                z[dim],
                config.horizon,
                config.substeps,
            )?;
            match config.slack_weight {
                Some(w) => crate::mpc::solve::soften(&problem, w),
                None => Ok(problem),
            }
        },
        &mut adv_plant,
        config.t_steps,
    )
    .map_err(|e| e.in_stage("adversarial-mpc"))?;
    if let Some(dir) = out_dir {
        write_traj_csv(dir, "adversarial.csv", &adv.trajectory, dim)
            .map_err(|e| e.in_stage("adversarial-mpc"))?;
    }
    // Adversarial control increments in amperes and the recorded
    // low-fidelity anchor states (bulk soc, held current in amperes).
    let mut u_adv = Vec::with_capacity(adv.applied.len());
    let mut anchors = Vec::with_capacity(adv.applied.len());
    let mut held_density = 0.0;
    for (k, du) in adv.applied.iter().enumerate() {
        anchors.push((
            adv.trajectory.soc_bulk[k * config.substeps],
            held_density * config.area,
        ));
        u_adv.push(du[0] * config.area);
        held_density += du[0];
    }
    if let Some(failure) = adv.failure {
        return Err(failure.error.in_stage("adversarial-mpc"));
    }

    // Stage 4: fit the benign baseline and the compromised weights.
    let (u_ref, ref_anchors) =
        benign_reference(&rint, &ctrl_limits, bulk0, dt_ctrl, config.t_steps);
    let ref_scenario = FitScenario {
        rint: rint.clone(),
        limits: ctrl_limits,
        horizon: config.horizon,
        dt_ctrl,
        anchoring: Anchoring::ReplayAnchored,
        z0: ref_anchors[0],
        anchors: ref_anchors,
    };
    let (theta_nominal, nominal_fit) =
        fit_theta(&u_ref, &config.theta0, &config.fit, &ref_scenario)
            .map_err(|e| e.in_stage("inverse-fit"))?;
    if let Some(dir) = out_dir {
        fs::write(dir.join("nominal_fit_history.csv"), nominal_fit.history_csv())
            .map_err(|e| Error::from(e).in_stage("inverse-fit"))?;
    }
    let adv_scenario = FitScenario {
        rint: rint.clone(),
        limits: ctrl_limits,
        horizon: config.horizon,
        dt_ctrl,
        anchoring: Anchoring::ReplayAnchored,
        z0: anchors[0],
        anchors,
    };
    let (theta_star, fit) = fit_theta(&u_adv, &config.theta0, &config.fit, &adv_scenario)
        .map_err(|e| e.in_stage("inverse-fit"))?;
    if let Some(dir) = out_dir {
        fs::write(dir.join("fit_history.csv"), fit.history_csv())
            .map_err(|e| Error::from(e).in_stage("inverse-fit"))?;
    }

    // Stage 5: deploy the compromised and nominal controllers.
    let compromised = deploy_theta(config, &rint, &ctrl_limits, &theta_star, &x_init, bulk0)
        .map_err(|e| e.in_stage("deployment"))?;
    if let Some(dir) = out_dir {
        write_traj_csv(dir, "compromised.csv", &compromised.trajectory, dim)
            .map_err(|e| e.in_stage("deployment"))?;
    }
    if let Some(failure) = compromised.failure {
        return Err(failure.error.in_stage("deployment"));
    }
    let nominal = deploy_theta(config, &rint, &ctrl_limits, &theta_nominal, &x_init, bulk0)
        .map_err(|e| e.in_stage("deployment"))?;
    if let Some(dir) = out_dir {
        write_traj_csv(dir, "nominal.csv", &nominal.trajectory, dim)
            .map_err(|e| e.in_stage("deployment"))?;
    }
    if let Some(failure) = nominal.failure {
        return Err(failure.error.in_stage("deployment"));
    }

    // Stage 6: evaluate satisfaction and stealth on both runs.
    let (satisfaction, satisfied_count) =
        evaluate_satisfaction(&compromised.trajectory, &config.gamma);
    let (_, nominal_satisfied_count) = evaluate_satisfaction(&nominal.trajectory, &config.gamma);
    let stealth_violations = stealth_audit(
        &compromised.trajectory.with_scaled_currents(config.area),
        &rint,
        &config.limits,
    );
    let nominal_stealth_violations = stealth_audit(
        &nominal.trajectory.with_scaled_currents(config.area),
        &rint,
        &config.limits,
    );
    if satisfaction.len() != compromised.trajectory.len() {
        return Err(Error::Solver(format!(
            "satisfaction has {} entries for {} samples",
            satisfaction.len(),
            compromised.trajectory.len()
        ))
        .in_stage("evaluation"));
    }
    let report = AttackReport {
        level: config.gamma,
        rint,
        u_adv,
        theta_star,
        theta_nominal,
        nominal_traj: nominal.trajectory,
        compromised_traj: compromised.trajectory,
        satisfaction,
        satisfied_count,
        nominal_satisfied_count,
        stealth_violations,
        nominal_stealth_violations,
        fit,
        nominal_fit_loss: nominal_fit.final_loss(),
        fingerprint: config.fingerprint(),
    };
    if let Some(dir) = out_dir {
        report.persist(dir).map_err(|e| e.in_stage("evaluation"))?;
    }
    Ok(report)
}
