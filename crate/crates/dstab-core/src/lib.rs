//! Core library for the dstab battery-control study: a two-particle
//! diffusion model, an equivalent-circuit view with identification
//! routines, constrained model-predictive control, inverse fitting of
//! controller weights from demonstrations, and the staged attack pipeline
//! tying them together.

pub mod attack;
pub mod error;
pub mod inverse;
pub mod mpc;
pub mod ocv;
pub mod rint;
pub mod spm;

pub use attack::{
    compare_levels, evaluate_satisfaction, identify_from_records, run_dstab, run_excitation,
    satisfaction_margins, stealth_audit, AttackLevel, AttackReport, ConfigFingerprint,
    ExcitationRecord, LevelComparison, LevelLabel, LevelRow, PipelineConfig, StealthConstraint,
    StealthViolation,
};
pub use error::{Error, Result};
pub use inverse::{
    bilevel_loss, control_sensitivity, fd_gradient, fit_theta, gradient_detail, pdp_gradient,
    sample_scenario, Anchoring, ControlSensitivity, FitReport, FitScenario, FitSchedule,
    FitStatus, GradientDetail, ThetaParams,
};
pub use mpc::{
    build_high_fidelity_problem, build_low_fidelity_problem, receding_horizon, solve, Limits,
    MpcProblem, MpcSolution, Plant, RecedingOutcome, RintPlant, SolveStatus, SpmPlant, SpmView,
};
pub use ocv::Polynomial;
pub use rint::{
    identify_capacity, identify_ocv, identify_r0, simulate_rint, EcmState, IdentificationReport,
    RintParams,
};
pub use spm::{
    build_diffusion_operators, bulk_soc, init_state, simulate, step, surf_soc, terminal_voltage,
    DiffusionOperators, ElectrodeParams, SpmParams, SpmState, Trajectory,
};
