//! Runs one experiment and writes its output files.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use spine_mpc::closed_loop::{run_closed_loop, tracking_metrics, Controller, LoopError, LoopSettings, SimulationLog};
use spine_mpc::ik::{ik_rest_lengths, IkSettings};
use spine_mpc::trajectory::{generate_bend, ReferenceTrajectory};
use spine_mpc::{SpineConfig, StateLayout};

use crate::config::{ExperimentConfig, InitialInput};

/// How a run ended.
#[derive(Debug)]
pub enum Outcome {
    Completed,
    Aborted(String),
}

/// Failure before the loop could produce a log.
#[derive(Debug)]
pub enum RunError {
    Invalid(anyhow::Error),
    Failed(anyhow::Error),
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Failed(e.into())
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Outcome, RunError> {
    cfg.validate().map_err(RunError::Invalid)?;
    let spine = cfg.spine();
    let controller = cfg.controller();
    let (u_min, u_max) = controller.input_bounds();
    let steps = cfg.steps();

    let mut traj = generate_bend(&spine, cfg.trajectory.sweep, cfg.duration())
        .context("[trajectory]")
        .map_err(RunError::Invalid)?;
    if let Controller::Reference(_) = controller {
        let ik = IkSettings { min_density: cfg.ik.min_density, max_rest_length: u_max.max(u_min) };
        traj = traj.with_ik_inputs(&spine, &ik).context("reference inputs").map_err(RunError::Invalid)?;
    }
    let mut settings = LoopSettings::for_controller(&controller);
    settings.tol = cfg.solver_tol();
    settings.max_iter = cfg.run.max_iter;
    settings.max_consecutive_failures = cfg.run.max_consecutive_failures;
    if cfg.run.initial_input == InitialInput::Equilibrium {
        let ik = IkSettings { min_density: cfg.ik.min_density, max_rest_length: u_max };
        let sol = ik_rest_lengths(&spine, &traj.states[0], &ik)
            .context("equilibrium initial input")
            .map_err(RunError::Invalid)?;
        settings.initial_input = Some(sol.rest_lengths);
    }

    let out = &cfg.run.out;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display())).map_err(RunError::Failed)?;
    write_atomic(out, "trajectory_ref.csv", |w| traj.write_csv(w).map_err(Into::into))?;

    let started = Instant::now();
    log::info!("{}: {} steps on the {:?} model", controller.name(), steps, spine.dimension);
    let log = run_closed_loop(&spine, &controller, &traj, &cfg.disturbance.spec(), steps, &settings).map_err(|e| match e {
        LoopError::Incompatible(_) => RunError::Invalid(e.into()),
        _ => RunError::Failed(e.into()),
    })?;
    let wall = started.elapsed().as_secs_f64();

    write_atomic(out, "log.csv", |w| log.write_csv(w).map_err(Into::into))?;
    write_atomic(out, "xz_paths.csv", |w| write_xz_paths(w, &log, &spine.layout()))?;
    let metrics = metrics_text(cfg, &spine, &controller, &settings, &log, &traj, wall);
    write_atomic(out, "metrics.txt", |w| Ok(w.write_all(metrics.as_bytes())?))?;

    Ok(match log.aborted {
        Some(reason) => Outcome::Aborted(reason),
        None => Outcome::Completed,
    })
}

/// Writes `dir/name` through a temporary file in the same directory.
fn write_atomic<F>(dir: &Path, name: &str, fill: F) -> Result<(), RunError>
where
    F: FnOnce(&mut std::io::BufWriter<&mut tempfile::NamedTempFile>) -> Result<()>,
{
    let path = dir.join(name);
    let result = (|| -> Result<()> {
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        {
            let mut w = std::io::BufWriter::new(&mut tmp);
            fill(&mut w)?;
            w.flush()?;
        }
        tmp.as_file().sync_all()?;
        tmp.persist(&path)?;
        Ok(())
    })();
    result.with_context(|| format!("writing {}", path.display())).map_err(RunError::Failed)
}

/// Plant and reference X-Z coordinates of every vertebra per step.
fn write_xz_paths<W: Write>(w: W, log: &SimulationLog, layout: &StateLayout) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    let mut header = vec!["step".to_string(), "t".to_string()];
    for i in 1..=layout.blocks.len() {
        header.extend([format!("x{i}"), format!("z{i}"), format!("x{i}_ref"), format!("z{i}_ref")]);
    }
    csv.write_record(&header)?;
    for r in &log.rows {
        let mut rec = vec![r.step.to_string(), r.time.to_string()];
        for b in &layout.blocks {
            let (xi, zi) = (b.position.start, b.z_index);
            rec.extend([r.state[xi], r.state[zi], r.reference[xi], r.reference[zi]].map(|v| v.to_string()));
        }
        csv.write_record(&rec)?;
    }
    csv.flush()?;
    Ok(())
}

fn list(v: &[f64]) -> String {
    format!("[{}]", v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","))
}

fn metrics_text(
    cfg: &ExperimentConfig,
    spine: &SpineConfig,
    controller: &Controller,
    settings: &LoopSettings,
    log: &SimulationLog,
    traj: &ReferenceTrajectory,
    wall: f64,
) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k}={v}");
    };
    kv("controller", controller.name().to_string());
    kv("dimension", format!("{:?}", spine.dimension).to_lowercase());
    kv("vertebrae", spine.num_moving_vertebrae.to_string());
    kv("dt", spine.dt.to_string());
    match controller {
        Controller::Reference(c) => {
            kv("N", c.horizon.to_string());
            kv("Q", list(&c.q));
            kv("P", list(&c.p));
            kv("R", list(&c.r));
            kv("u_min", c.u_min.to_string());
            kv("u_max", c.u_max.to_string());
            kv("h", c.h.to_string());
        }
        Controller::Smoothing(c) => {
            kv("N", c.horizon.to_string());
            let w = [c.w1, c.w2, c.w3, c.w4, c.w5, c.w6, c.w7, c.w8, c.w9, c.w10, c.w11];
            for (i, v) in w.iter().enumerate() {
                kv(&format!("w{}", i + 1), v.to_string());
            }
            kv("u_min", c.u_min.to_string());
            kv("u_max", c.u_max.to_string());
        }
    }
    kv("solver_tol", settings.tol.to_string());
    kv("sweep", traj.sweep_angle.to_string());
    kv("duration", traj.duration.to_string());
    kv("disturbance", if cfg.disturbance.enabled { "on" } else { "off" }.to_string());
    kv("seed", cfg.disturbance.seed.to_string());
    kv("initial_input", format!("{:?}", cfg.run.initial_input).to_lowercase());
    kv("steps", log.rows.len().to_string());
    kv("aborted", log.aborted.clone().unwrap_or_else(|| "no".into()));
    kv("wall_time_s", format!("{wall:.3}"));
    match tracking_metrics(log, cfg.run.settle_threshold) {
        Some(m) => {
            kv("failed_solves", m.failed_solves.to_string());
            kv("constraint_violations", m.constraint_violations.to_string());
            kv("max_model_mismatch", m.max_model_mismatch.to_string());
            kv("settle_threshold", cfg.run.settle_threshold.to_string());
            kv("transient", m.transient.map_or("none".into(), |t| t.to_string()));
            for (i, v) in m.vertebrae.iter().enumerate() {
                let i = i + 1;
                kv(&format!("max_pos_err_{i}"), v.max_position_error.to_string());
                kv(&format!("mean_pos_err_{i}"), v.mean_position_error.to_string());
                kv(&format!("final_pos_err_{i}"), v.final_position_error.to_string());
                kv(&format!("max_ang_err_{i}"), v.max_angle_error.to_string());
                kv(&format!("settling_time_{i}"), v.settling_time.map_or("none".into(), |t| t.to_string()));
            }
        }
        None => {
            kv("failed_solves", "0".into());
            kv("constraint_violations", "0".into());
        }
    }
    s
}
