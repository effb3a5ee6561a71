//! TOML run configuration: parsing with strict key checking, validation
//! that names the offending field, a canonical echo of the resolved
//! values, and conversion into per-level pipeline configurations.

use dstab_core::{
    AttackLevel, Error, FitSchedule, Limits, PipelineConfig, Result, RintParams, SpmParams,
    ThetaParams,
};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

/// Whole-run configuration. Every key is optional — an empty file (or no
/// file at all) runs the stock cell with the published defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Recorded in run fingerprints; the pipeline itself is deterministic.
    pub seed: u64,
    /// Directory all artifacts are written into.
    pub output_dir: PathBuf,
    /// Plant parameters (the stock graphite/LCO-flavored cell by default).
    pub spm: SpmParams,
    /// Skips excitation and identification when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rint_override: Option<RintParams>,
    pub mpc: MpcSection,
    pub attack: AttackSection,
    pub fit: FitSection,
}

/// Horizon, run length and operating limits shared by both controllers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcSection {
    /// Prediction horizon N.
    pub horizon: usize,
    /// Closed-loop control periods T.
    pub t_steps: usize,
    /// Plant steps per control period.
    pub substeps: usize,
    /// Pre-softens the adversarial gap rows at this quadratic penalty
    /// instead of the solver's retry-on-infeasible default.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slack_weight: Option<f64>,
    pub limits: Limits,
}

/// Attack levels and the charging task they run against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    /// Levels to run: any of "low", "medium", "high", "custom".
    pub levels: Vec<String>,
    /// Cost weights (q, r) of the adversarial high-fidelity controller.
    pub theta_h: (f64, f64),
    /// Initial anode state of charge.
    pub soc0: f64,
    /// Electrode area (m²) converting current density to amperes.
    pub area: f64,
    /// Voltage margin the controllers keep below v_max so within-period
    /// excursions stay under the audited bound.
    pub v_backoff: f64,
    /// Gap-condition strength used by the "custom" level.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub custom: Option<CustomGamma>,
}

/// Gap-condition coefficients of a user-defined level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomGamma {
    pub gamma1: f64,
    pub gamma2: f64,
}

/// Weight-fitting schedule shared by the nominal and attack fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    /// Base learning rate.
    pub alpha: f64,
    pub max_iters: usize,
    /// Stop once loss or gradient norm falls below this.
    pub tol: f64,
    /// Fit starting point (q, r).
    pub theta0: (f64, f64),
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("dstab-out"),
            spm: SpmParams::default(),
            rint_override: None,
            mpc: MpcSection::default(),
            attack: AttackSection::default(),
            fit: FitSection::default(),
        }
    }
}

impl Default for MpcSection {
    fn default() -> Self {
        MpcSection {
            horizon: 10,
            t_steps: 200,
            substeps: 10,
            slack_weight: None,
            limits: Limits::default(),
        }
    }
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            levels: vec!["low".to_string()],
            theta_h: (1.0, 1e-3),
            soc0: 0.25,
            area: 1.0,
            v_backoff: 0.01,
            custom: None,
        }
    }
}

impl Default for FitSection {
    fn default() -> Self {
        let sched = FitSchedule::default();
        FitSection {
            alpha: sched.alpha,
            max_iters: sched.max_iters,
            tol: sched.tol,
            theta0: (1.0, 1.0),
        }
    }
}

impl RunConfig {
    /// Reads and validates a configuration file. Parse errors carry the
    /// file path and the offending key or line.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    /// Checks every field, naming the offending one, and verifies each
    /// configured level yields a runnable pipeline.
    pub fn validate(&self) -> Result<()> {
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("output_dir must not be empty".into()));
        }
        for level in self.resolve_levels()? {
            self.to_pipeline(level.clone())
                .validate()
                .map_err(|e| Error::Config(format!("level '{}': {e}", level.name())))?;
        }
        Ok(())
    }

    /// Maps the configured level names to their gap coefficients. The
    /// "custom" name requires an `[attack.custom]` table; duplicates are
    /// rejected because artifacts are filed per level name.
    pub fn resolve_levels(&self) -> Result<Vec<AttackLevel>> {
        if self.attack.levels.is_empty() {
            return Err(Error::Config(
                "attack.levels must name at least one level".into(),
            ));
        }
        let mut out: Vec<AttackLevel> = Vec::with_capacity(self.attack.levels.len());
        for name in &self.attack.levels {
            let level = if name.eq_ignore_ascii_case("custom") {
                let c = self.attack.custom.as_ref().ok_or_else(|| {
                    Error::Config(
                        "level 'custom' requires an [attack.custom] table with gamma1 and gamma2"
                            .into(),
                    )
                })?;
                AttackLevel::custom(c.gamma1, c.gamma2)
            } else {
                AttackLevel::from_name(name).ok_or_else(|| {
                    Error::Config(format!(
                        "unknown attack level '{name}' (expected low, medium, high, or custom)"
                    ))
                })?
            };
            if out.iter().any(|l| l.name() == level.name()) {
                return Err(Error::Config(format!(
                    "attack.levels lists '{}' more than once",
                    level.name()
                )));
            }
            out.push(level);
        }
        Ok(out)
    }

    /// Assembles the pipeline configuration for one attack level.
    pub fn to_pipeline(&self, gamma: AttackLevel) -> PipelineConfig {
        PipelineConfig {
            spm: self.spm.clone(),
            limits: self.mpc.limits,
            gamma,
            horizon: self.mpc.horizon,
            t_steps: self.mpc.t_steps,
            substeps: self.mpc.substeps,
            theta_h: self.attack.theta_h,
            soc0: self.attack.soc0,
            area: self.attack.area,
            v_backoff: self.attack.v_backoff,
            fit: FitSchedule {
                alpha: self.fit.alpha,
                max_iters: self.fit.max_iters,
                tol: self.fit.tol,
            },
            theta0: ThetaParams::new(self.fit.theta0.0, self.fit.theta0.1),
            slack_weight: self.mpc.slack_weight,
            rint_override: self.rint_override.clone(),
            seed: self.seed,
        }
    }

    /// Canonical TOML of the fully resolved configuration. Parsing the
    /// echo reproduces this configuration exactly.
    pub fn echo_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("cannot serialize configuration: {e}")))
    }
}
