//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by model construction, identification, solvers and the
/// attack pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter failed validation; the message names the field and the
    /// violated constraint.
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// The requested explicit-Euler step is unstable for the diffusion
    /// operator.
    #[error(
        "diffusion step unstable: dt = {dt:.6e} s exceeds the maximum admissible dt = {dt_max:.6e} s"
    )]
    UnstableDt { dt: f64, dt_max: f64 },

    /// A non-finite value was produced or supplied where a finite one is
    /// required.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// Identification data does not excite the parameter being fitted.
    #[error("insufficient excitation: {0}")]
    InsufficientExcitation(String),

    /// Structurally invalid input (lengths, emptiness, ordering).
    #[error("bad input: {0}")]
    BadInput(String),

    /// Configuration parse or validation failure.
    #[error("config error: {0}")]
    Config(String),

    /// An optimization solve failed outright (as opposed to returning a
    /// non-optimal status).
    #[error("solver failure: {0}")]
    Solver(String),

    /// A lower-level controller solve inside the inverse fit failed.
    #[error("lower-level solve failed at step {step}: {reason}")]
    LowerLevel { step: usize, reason: String },

    /// Reports handed to a comparison do not share a configuration.
    #[error("report mismatch: {0}")]
    ReportMismatch(String),

    /// A pipeline stage failed; wraps the underlying cause with a stage tag.
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Wraps an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
