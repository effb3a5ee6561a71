//! Receding-horizon closed loop: re-solve the problem at every step from
//! the current plant observation and apply the first control.

use super::problem::MpcProblem;
use super::solve::{solve, MpcSolution, SolveStatus};
use crate::error::{Error, Result};
use crate::rint::{self, EcmState, RintParams};
use crate::spm::{self, DiffusionOperators, SpmParams, SpmState, Trajectory};
use nalgebra::DVector;

/// A plant the loop can observe, drive, and transcribe.
pub trait Plant {
    /// Controller-visible state (including any held-input augmentation),
    /// in the units the problem builder expects.
    fn observe(&self) -> DVector<f64>;
    /// Applies the first control for one control period.
    fn apply(&mut self, u0: &DVector<f64>) -> Result<()>;
    /// Recorded run so far, at plant time resolution.
    fn trajectory(&self) -> Trajectory;
}

/// Which controller-facing state the particle plant exposes.
#[derive(Debug, Clone)]
pub enum SpmView {
    /// Full concentration vector plus held current density.
    HighFidelity,
    /// Defender mapping: [bulk soc; held current in amperes]; controls
    /// arrive in amperes and are converted by `area`.
    LowFidelity { area: f64 },
}

/// Particle-model plant stepped at its own dt, driven at the control
/// period `substeps × dt`.
pub struct SpmPlant {
    pub params: SpmParams,
    ops: DiffusionOperators,
    pub state: SpmState,
    pub substeps: usize,
    pub view: SpmView,
    states_hist: Vec<SpmState>,
    currents_hist: Vec<f64>,
}

impl SpmPlant {
    pub fn new(
        params: SpmParams,
        x0: SpmState,
        substeps: usize,
        view: SpmView,
    ) -> Result<SpmPlant> {
        if substeps == 0 {
            return Err(Error::BadInput("substeps must be at least 1".into()));
        }
        let ops = spm::build_diffusion_operators(&params)?;
        Ok(SpmPlant {
            params,
            ops,
            states_hist: vec![x0.clone()],
            state: x0,
            substeps,
            view,
            currents_hist: Vec::new(),
        })
    }
}

impl Plant for SpmPlant {
    fn observe(&self) -> DVector<f64> {
        match &self.view {
            SpmView::HighFidelity => {
                let dim = self.state.conc.len();
                let mut z = DVector::<f64>::zeros(dim + 1);
                for i in 0..dim {
                    z[i] = self.state.conc[i];
                }
                z[dim] = self.state.i_prev;
                z
            }
            SpmView::LowFidelity { area } => DVector::from_vec(vec![
                spm::bulk_soc(&self.params, &self.state.conc),
                self.state.i_prev * area,
            ]),
        }
    }

    fn apply(&mut self, u0: &DVector<f64>) -> Result<()> {
        let delta_density = match &self.view {
            SpmView::HighFidelity => u0[0],
            SpmView::LowFidelity { area } => u0[0] / area,
        };
        let i_density = self.state.i_prev + delta_density;
        for _ in 0..self.substeps {
            let delta = i_density - self.state.i_prev;
            self.state = spm::step(&self.params, &self.ops, &self.state, delta)?;
            self.states_hist.push(self.state.clone());
            self.currents_hist.push(i_density);
        }
        Ok(())
    }

    fn trajectory(&self) -> Trajectory {
        let len = self.states_hist.len();
        let mut traj = Trajectory {
            dt: self.params.dt,
            times: Vec::with_capacity(len),
            currents: Vec::with_capacity(len),
            voltages: Vec::with_capacity(len),
            soc_bulk: Vec::with_capacity(len),
            soc_surf: Vec::with_capacity(len),
            states: Vec::with_capacity(len),
            clamp_flags: Vec::with_capacity(len),
        };
        for (k, st) in self.states_hist.iter().enumerate() {
            let i_now = if k < self.currents_hist.len() {
                self.currents_hist[k]
            } else {
                self.currents_hist.last().copied().unwrap_or(st.i_prev)
            };
            let (v, clamped) = spm::terminal_voltage(&self.params, st, i_now);
            traj.times.push(k as f64 * self.params.dt);
            traj.currents.push(i_now);
            traj.voltages.push(v);
            traj.soc_bulk.push(spm::bulk_soc(&self.params, &st.conc));
            traj.soc_surf.push(spm::surf_soc(&self.params, &st.conc));
            traj.states.push(st.conc.clone());
            traj.clamp_flags.push(clamped);
        }
        traj
    }
}

/// Equivalent-circuit plant; one step per control period (amperes).
pub struct RintPlant {
    pub params: RintParams,
    pub state: EcmState,
    pub dt: f64,
    states_hist: Vec<EcmState>,
    currents_hist: Vec<f64>,
}

impl RintPlant {
    pub fn new(params: RintParams, x0: EcmState, dt: f64) -> Result<RintPlant> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParam(format!("dt must be > 0, got {dt}")));
        }
        Ok(RintPlant {
            params,
            states_hist: vec![x0],
            state: x0,
            dt,
            currents_hist: Vec::new(),
        })
    }
}

impl Plant for RintPlant {
    fn observe(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.state.soc, self.state.i_prev])
    }

    fn apply(&mut self, u0: &DVector<f64>) -> Result<()> {
        self.state = rint::step_soc(&self.state, u0[0], &self.params, self.dt);
        self.states_hist.push(self.state);
        self.currents_hist.push(self.state.i_prev);
        Ok(())
    }

    fn trajectory(&self) -> Trajectory {
        let len = self.states_hist.len();
        let mut traj = Trajectory {
            dt: self.dt,
            times: Vec::with_capacity(len),
            currents: Vec::with_capacity(len),
            voltages: Vec::with_capacity(len),
            soc_bulk: Vec::with_capacity(len),
            soc_surf: Vec::with_capacity(len),
            states: Vec::with_capacity(len),
            clamp_flags: Vec::with_capacity(len),
        };
        for (k, st) in self.states_hist.iter().enumerate() {
            let i_now = if k < self.currents_hist.len() {
                self.currents_hist[k]
            } else {
                self.currents_hist.last().copied().unwrap_or(st.i_prev)
            };
            let (v, clamped) = rint::terminal_voltage(st, i_now, &self.params);
            traj.times.push(k as f64 * self.dt);
            traj.currents.push(i_now);
            traj.voltages.push(v);
            traj.soc_bulk.push(st.soc);
            traj.soc_surf.push(st.soc);
            traj.states.push(DVector::zeros(0));
            traj.clamp_flags.push(clamped);
        }
        traj
    }
}

/// Why and where a closed loop stopped early.
#[derive(Debug)]
pub struct RecedingFailure {
    pub step: usize,
    pub error: Error,
}

/// Closed-loop artifacts: the plant run, every per-step solution, the
/// applied first controls, and an early-stop record if any.
pub struct RecedingOutcome {
    pub trajectory: Trajectory,
    pub solutions: Vec<MpcSolution>,
    pub applied: Vec<DVector<f64>>,
    pub failure: Option<RecedingFailure>,
}

impl RecedingOutcome {
    pub fn completed(&self) -> bool {
        self.failure.is_none()
    }
}

/// Runs `t_steps` iterations of observe → rebuild → solve → apply. A
/// build/solve failure or an infeasible solve stops the loop, returning
/// the partial trajectory with the failing step recorded.
pub fn receding_horizon<P, F>(
    mut build: F,
    plant: &mut P,
    t_steps: usize,
) -> Result<RecedingOutcome>
where
    P: Plant,
    F: FnMut(usize, &DVector<f64>) -> Result<MpcProblem>,
{
    if t_steps == 0 {
        return Err(Error::BadInput("receding horizon needs t_steps >= 1".into()));
    }
    let mut solutions = Vec::with_capacity(t_steps);
    let mut applied = Vec::with_capacity(t_steps);
    let mut failure = None;
    for t in 0..t_steps {
        let z = plant.observe();
        let problem = match build(t, &z) {
            Ok(p) => p,
            Err(e) => {
                failure = Some(RecedingFailure { step: t, error: e });
                break;
            }
        };
        let sol = match solve(&problem) {
            Ok(s) => s,
            Err(e) => {
                failure = Some(RecedingFailure { step: t, error: e });
                break;
            }
        };
        if sol.status == SolveStatus::Infeasible {
            failure = Some(RecedingFailure {
                step: t,
                error: Error::Solver(format!("infeasible problem at closed-loop step {t}")),
            });
            solutions.push(sol);
            break;
        }
        let u0 = sol.first_control().clone();
        if let Err(e) = plant.apply(&u0) {
            failure = Some(RecedingFailure { step: t, error: e });
            solutions.push(sol);
            break;
        }
        solutions.push(sol);
        applied.push(u0);
    }
    Ok(RecedingOutcome {
        trajectory: plant.trajectory(),
        solutions,
        applied,
        failure,
    })
}
