//! Receding-horizon simulation: linearize, build, solve, apply the first
//! input to the nonlinear plant, disturb, log.

use std::io::Write;

use thiserror::Error;

use crate::cftoc::{
    build_reference_cftoc, build_smoothing_cftoc, extract_first_input, solve_horizon, CftocError, HorizonProblem,
    HorizonSolution, ReferenceControllerConfig, SmoothingControllerConfig,
};
use crate::linearize::{self, AffineModel, DEFAULT_DELTA};
use crate::model::{self, InputVector, ModelError, SpineConfig, StateLayout, StateVector};
use crate::qp::QpStatus;
use crate::trajectory::{apply_disturbance, DisturbanceSpec, ReferenceTrajectory};

/// A discrete-time plant the loop can drive.
pub trait Plant {
    fn layout(&self) -> StateLayout;
    fn input_dim(&self) -> usize;
    fn dt(&self) -> f64;
    fn step(&self, state: &StateVector, input: &InputVector) -> Result<StateVector, ModelError>;
    fn linearize(&self, state: &StateVector, input: &InputVector) -> Result<AffineModel, ModelError>;
}

impl Plant for SpineConfig {
    fn layout(&self) -> StateLayout {
        SpineConfig::layout(self)
    }

    fn input_dim(&self) -> usize {
        self.num_cables()
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn step(&self, state: &StateVector, input: &InputVector) -> Result<StateVector, ModelError> {
        model::step(self, state, input)
    }

    fn linearize(&self, state: &StateVector, input: &InputVector) -> Result<AffineModel, ModelError> {
        linearize::linearize(self, state, input, DEFAULT_DELTA)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Controller {
    Smoothing(SmoothingControllerConfig),
    Reference(ReferenceControllerConfig),
}

impl Controller {
    pub fn name(&self) -> &'static str {
        match self {
            Controller::Smoothing(_) => "smoothing",
            Controller::Reference(_) => "reference",
        }
    }

    pub fn input_bounds(&self) -> (f64, f64) {
        match self {
            Controller::Smoothing(c) => (c.u_min, c.u_max),
            Controller::Reference(c) => (c.u_min, c.u_max),
        }
    }

    /// Number of hard state constraints `state` violates: z-ordering with
    /// margin `w7` for the smoothing controller, `z ≥ h/2` for the reference one.
    pub fn collision_violations(&self, layout: &StateLayout, state: &StateVector) -> usize {
        let eps = 1e-9;
        match self {
            Controller::Smoothing(c) => layout
                .blocks
                .windows(2)
                .filter(|p| state[p[0].z_index] + c.w7 > state[p[1].z_index] + eps)
                .count(),
            Controller::Reference(c) => match c.z_index {
                Some(zi) => usize::from(state[zi] < 0.5 * c.h - eps),
                None => 0,
            },
        }
    }

    fn horizon(&self) -> usize {
        match self {
            Controller::Smoothing(c) => c.horizon,
            Controller::Reference(c) => c.horizon,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoopSettings {
    pub tol: f64,
    pub max_iter: usize,
    /// Consecutive failed solves tolerated before the run is aborted.
    pub max_consecutive_failures: usize,
    /// Input in force before the first step; zeros when `None`.
    pub initial_input: Option<InputVector>,
    /// Plant state at `t = 0`; the first reference state when `None`.
    pub initial_state: Option<StateVector>,
}

impl Default for LoopSettings {
    fn default() -> Self {
        LoopSettings { tol: 1e-7, max_iter: 200, max_consecutive_failures: 20, initial_input: None, initial_state: None }
    }
}

impl LoopSettings {
    /// Default settings with the solve tolerance used for `controller`.
    ///
    /// The smoothing weights grow as `w^k` along the horizon, so its relative
    /// residual stalls near `1e-5` while the tracking error is large.
    pub fn for_controller(controller: &Controller) -> Self {
        let tol = match controller {
            Controller::Smoothing(_) => 1e-4,
            Controller::Reference(_) => 1e-8,
        };
        LoopSettings { tol, ..LoopSettings::default() }
    }
}

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("{0}")]
    Incompatible(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cftoc(#[from] CftocError),
}

/// One plant step. `state` is the state the controller saw; `input` is what
/// was applied during the step.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub time: f64,
    pub status: Option<QpStatus>,
    pub objective: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    /// `‖ξ_{t+1} - (Aξ_t + Bu_t + c)‖∞`, nonlinearity plus disturbance.
    pub model_mismatch: f64,
    pub violations: usize,
    pub position_error: Vec<f64>,
    pub angle_error: Vec<f64>,
    pub input: InputVector,
    pub state: StateVector,
    pub reference: StateVector,
    pub input_reference: Option<InputVector>,
}

impl LogRow {
    pub fn solved(&self) -> bool {
        self.status == Some(QpStatus::Optimal)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationLog {
    pub controller: String,
    pub rows: Vec<LogRow>,
    /// Plant state after the last logged step.
    pub final_state: StateVector,
    /// Why the run stopped early, if it did.
    pub aborted: Option<String>,
}

impl SimulationLog {
    /// Columns: `step,t,status,objective,iterations,kkt_residual,model_mismatch,violations`,
    /// then `pos_err_i` and `ang_err_i` per vertebra, `u*`, `x*`, `ref*` and,
    /// when present, `uref*`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let first = self.rows.first();
        let nb = first.map_or(0, |r| r.position_error.len());
        let m = first.map_or(0, |r| r.input.len());
        let n = first.map_or(self.final_state.len(), |r| r.state.len());
        let mu = first.and_then(|r| r.input_reference.as_ref()).map_or(0, |u| u.len());
        let mut header: Vec<String> =
            ["step", "t", "status", "objective", "iterations", "kkt_residual", "model_mismatch", "violations"]
                .iter()
                .map(|s| s.to_string())
                .collect();
        header.extend((1..=nb).map(|i| format!("pos_err_{i}")));
        header.extend((1..=nb).map(|i| format!("ang_err_{i}")));
        header.extend((0..m).map(|j| format!("u{j}")));
        header.extend((0..n).map(|i| format!("x{i}")));
        header.extend((0..n).map(|i| format!("ref{i}")));
        header.extend((0..mu).map(|j| format!("uref{j}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.step.to_string(),
                r.time.to_string(),
                r.status.map_or("not_solved".to_string(), |s| s.to_string()),
                r.objective.to_string(),
                r.iterations.to_string(),
                r.kkt_residual.to_string(),
                r.model_mismatch.to_string(),
                r.violations.to_string(),
            ];
            let nums = r
                .position_error
                .iter()
                .chain(&r.angle_error)
                .chain(r.input.iter())
                .chain(r.state.iter())
                .chain(r.reference.iter())
                .chain(r.input_reference.iter().flat_map(|u| u.iter()));
            rec.extend(nums.map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn tracking_errors(layout: &StateLayout, x: &StateVector, r: &StateVector) -> (Vec<f64>, Vec<f64>) {
    let norm = |range: std::ops::Range<usize>| range.map(|i| (x[i] - r[i]).powi(2)).sum::<f64>().sqrt();
    layout.blocks.iter().map(|b| (norm(b.position.clone()), norm(b.angle.clone()))).unzip()
}

/// Runs `steps` receding-horizon steps. See [`run_closed_loop_observed`].
pub fn run_closed_loop<P: Plant>(
    plant: &P,
    controller: &Controller,
    traj: &ReferenceTrajectory,
    disturbance: &DisturbanceSpec,
    steps: usize,
    settings: &LoopSettings,
) -> Result<SimulationLog, LoopError> {
    run_closed_loop_observed(plant, controller, traj, disturbance, steps, settings, |_, _, _| {})
}

/// Closed loop that also hands every built problem and its solution to `observe`.
///
/// Failed solves keep the previous input in force; more than
/// `max_consecutive_failures` of them in a row stop the run, and the partial
/// log carries the reason in `aborted`.
pub fn run_closed_loop_observed<P, F>(
    plant: &P,
    controller: &Controller,
    traj: &ReferenceTrajectory,
    disturbance: &DisturbanceSpec,
    steps: usize,
    settings: &LoopSettings,
    mut observe: F,
) -> Result<SimulationLog, LoopError>
where
    P: Plant,
    F: FnMut(usize, &HorizonProblem, &HorizonSolution),
{
    let layout = plant.layout();
    let m = plant.input_dim();
    let dt = plant.dt();
    if traj.is_empty() {
        return Err(LoopError::Incompatible("reference trajectory is empty".into()));
    }
    if traj.states[0].len() != layout.dim {
        return Err(LoopError::Incompatible(format!(
            "reference states have {} entries, plant has {}",
            traj.states[0].len(),
            layout.dim
        )));
    }
    if let Controller::Reference(_) = controller {
        match &traj.inputs {
            Some(u) if u.first().map(|v| v.len()) == Some(m) => {}
            _ => return Err(LoopError::Incompatible("reference controller needs a matching input reference".into())),
        }
    }
    disturbance.validate().map_err(LoopError::Incompatible)?;

    let mut state = settings.initial_state.clone().unwrap_or_else(|| traj.states[0].clone());
    let mut input = settings.initial_input.clone().unwrap_or_else(|| InputVector::zeros(m));
    if state.len() != layout.dim || input.len() != m {
        return Err(LoopError::Incompatible("initial state or input has the wrong dimension".into()));
    }
    let (u_min, u_max) = controller.input_bounds();
    let horizon = controller.horizon();
    let mut rows = Vec::with_capacity(steps);
    let mut failures = 0usize;
    let mut aborted = None;

    for t in 0..steps {
        let model = plant.linearize(&state, &input)?;
        let window = traj.state_window(t, horizon + 1);
        let built = match controller {
            Controller::Smoothing(cfg) => build_smoothing_cftoc(&model, &state, &input, &window, cfg),
            Controller::Reference(cfg) => {
                let u_window = traj.input_window(t, horizon).expect("checked above");
                build_reference_cftoc(&model, &state, &window, &u_window, cfg)
            }
        };
        let solved = built.and_then(|problem| {
            let sol = solve_horizon(&problem, settings.tol, settings.max_iter)?;
            observe(t, &problem, &sol);
            Ok(sol)
        });
        let (status, objective, iterations, kkt_residual) = match &solved {
            Ok(sol) => (Some(sol.status), sol.objective, sol.iterations, sol.kkt_residual),
            Err(_) => (None, f64::NAN, 0, f64::NAN),
        };
        match solved.as_ref().map_err(|e| e.to_string()).and_then(|s| extract_first_input(s).map_err(|e| e.to_string())) {
            Ok(u) => {
                failures = 0;
                input = u;
            }
            Err(reason) => {
                failures += 1;
                log::warn!("step {t}: holding previous input ({reason})");
                if failures > settings.max_consecutive_failures {
                    aborted = Some(format!("{failures} consecutive failed solves, last: {reason}"));
                }
            }
        }

        let next = plant.step(&state, &input)?;
        let predicted = model.predict(&state, &input);
        let next = apply_disturbance(&next, disturbance, &layout, t);

        let reference = traj.states[t.min(traj.len() - 1)].clone();
        let (position_error, angle_error) = tracking_errors(&layout, &state, &reference);
        let input_violations = input.iter().filter(|&&u| u < u_min || u > u_max).count();
        rows.push(LogRow {
            step: t,
            time: t as f64 * dt,
            status,
            objective,
            iterations,
            kkt_residual,
            model_mismatch: (&next - &predicted).amax(),
            violations: input_violations + controller.collision_violations(&layout, &state),
            position_error,
            angle_error,
            input: input.clone(),
            state: state.clone(),
            input_reference: traj.input_window(t, 1).map(|mut w| w.remove(0)),
            reference,
        });
        state = next;
        if aborted.is_some() {
            break;
        }
    }
    Ok(SimulationLog { controller: controller.name().to_string(), rows, final_state: state, aborted })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VertebraMetrics {
    pub max_position_error: f64,
    pub mean_position_error: f64,
    pub final_position_error: f64,
    pub max_angle_error: f64,
    /// Time after which the position error stays below the threshold, if it does.
    pub settling_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingMetrics {
    pub steps: usize,
    pub vertebrae: Vec<VertebraMetrics>,
    /// Latest settling time over all vertebrae.
    pub transient: Option<f64>,
    pub constraint_violations: usize,
    pub failed_solves: usize,
    pub max_model_mismatch: f64,
}

/// Summary statistics of a log; `threshold` (m) defines settling.
pub fn tracking_metrics(log: &SimulationLog, threshold: f64) -> Option<TrackingMetrics> {
    let rows = &log.rows;
    let first = rows.first()?;
    let nb = first.position_error.len();
    let vertebrae: Vec<VertebraMetrics> = (0..nb)
        .map(|i| {
            let e: Vec<f64> = rows.iter().map(|r| r.position_error[i]).collect();
            let settle_idx = e.iter().rposition(|&v| v >= threshold).map_or(0, |k| k + 1);
            VertebraMetrics {
                max_position_error: e.iter().copied().fold(0.0, f64::max),
                mean_position_error: e.iter().sum::<f64>() / e.len() as f64,
                final_position_error: *e.last().unwrap(),
                max_angle_error: rows.iter().map(|r| r.angle_error[i]).fold(0.0, f64::max),
                settling_time: (settle_idx < rows.len()).then(|| rows[settle_idx].time),
            }
        })
        .collect();
    let transient = vertebrae.iter().try_fold(0.0f64, |acc, v| v.settling_time.map(|s| acc.max(s)));
    Some(TrackingMetrics {
        steps: rows.len(),
        transient,
        constraint_violations: rows.iter().map(|r| r.violations).sum(),
        failed_solves: rows.iter().filter(|r| !r.solved()).count(),
        max_model_mismatch: rows.iter().map(|r| r.model_mismatch).fold(0.0, f64::max),
        vertebrae,
    })
}
