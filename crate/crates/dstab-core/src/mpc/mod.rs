//! Finite-horizon constrained MPC: dense QP core, problem condensation,
//! sequential linearization, problem builders for both model fidelities,
//! and the receding-horizon closed loop.

pub mod builders;
pub mod problem;
pub mod qp;
pub mod receding;
pub mod solve;

pub use builders::{build_high_fidelity_problem, build_low_fidelity_problem, Limits};
pub use problem::{
    condense, Condensed, ConstraintDef, ConstraintForm, ConstraintKind, MpcProblem, QuadCost,
    SmoothTerm, StageDynamics,
};
pub use receding::{
    receding_horizon, Plant, RecedingFailure, RecedingOutcome, RintPlant, SpmPlant, SpmView,
};
pub use solve::{kkt_residual, soften, solve, MpcSolution, RawKkt, SolveStatus};
