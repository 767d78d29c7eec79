//! Bending references and seeded state disturbances.

use std::io::{Read, Write};

use nalgebra::DVector;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ik::{ik_rest_lengths, IkError, IkSettings};
use crate::model::{Dimension, InputVector, ModelError, SpineConfig, StateLayout, StateVector};

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("duration must be positive and finite, got {0}")]
    Duration(f64),
    #[error("reference collides at t = {time}: {reason}")]
    Collision { time: f64, reason: String },
    #[error("step {step}: {source}")]
    Ik { step: usize, source: IkError },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed trajectory file: {0}")]
    Format(String),
}

/// Time-stamped reference states, optionally with matching inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<StateVector>,
    pub inputs: Option<Vec<InputVector>>,
    pub sweep_angle: f64,
    pub duration: f64,
}

impl ReferenceTrajectory {
    /// `steps + 1` copies of `state` spaced by `dt`.
    pub fn constant(state: &StateVector, dt: f64, steps: usize) -> Self {
        ReferenceTrajectory {
            times: (0..=steps).map(|k| k as f64 * dt).collect(),
            states: vec![state.clone(); steps + 1],
            inputs: None,
            sweep_angle: 0.0,
            duration: steps as f64 * dt,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// `len` consecutive states from index `start`, repeating the last one past the end.
    pub fn state_window(&self, start: usize, len: usize) -> Vec<StateVector> {
        let last = self.states.len() - 1;
        (start..start + len).map(|k| self.states[k.min(last)].clone()).collect()
    }

    /// Input counterpart of [`Self::state_window`]; `None` without inputs.
    pub fn input_window(&self, start: usize, len: usize) -> Option<Vec<InputVector>> {
        let inputs = self.inputs.as_ref()?;
        let last = inputs.len() - 1;
        Some((start..start + len).map(|k| inputs[k.min(last)].clone()).collect())
    }

    /// Fills in static-equilibrium inputs for every reference pose.
    pub fn with_ik_inputs(mut self, config: &SpineConfig, settings: &IkSettings) -> Result<Self, TrajectoryError> {
        let inputs = self
            .states
            .iter()
            .enumerate()
            .map(|(step, x)| {
                ik_rest_lengths(config, x, settings).map(|s| s.rest_lengths).map_err(|source| TrajectoryError::Ik { step, source })
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.inputs = Some(inputs);
        Ok(self)
    }

    /// CSV with columns `t, x0..x{n-1}` and, when present, `u0..u{m-1}`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TrajectoryError> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.states.first().map_or(0, |x| x.len());
        let m = self.inputs.as_ref().and_then(|u| u.first()).map_or(0, |u| u.len());
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("x{i}")));
        header.extend((0..m).map(|j| format!("u{j}")));
        w.write_record(&header)?;
        for (k, (t, x)) in self.times.iter().zip(&self.states).enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(x.iter().map(|v| v.to_string()));
            if let Some(u) = &self.inputs {
                row.extend(u[k].iter().map(|v| v.to_string()));
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads what [`Self::write_csv`] writes. Sweep angle is not stored and reads as 0.
    pub fn read_csv<R: Read>(input: R) -> Result<Self, TrajectoryError> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        if header.get(0) != Some("t") {
            return Err(TrajectoryError::Format("first column must be t".into()));
        }
        let n = header.iter().filter(|h| h.starts_with('x')).count();
        let m = header.iter().filter(|h| h.starts_with('u')).count();
        if n + m + 1 != header.len() {
            return Err(TrajectoryError::Format("columns must be t, x*, u*".into()));
        }
        let (mut times, mut states, mut inputs) = (Vec::new(), Vec::new(), Vec::new());
        for (line, record) in r.records().enumerate() {
            let record = record?;
            let values = record
                .iter()
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| TrajectoryError::Format(format!("row {}: {e}", line + 1)))?;
            times.push(values[0]);
            states.push(DVector::from_column_slice(&values[1..1 + n]));
            inputs.push(DVector::from_column_slice(&values[1 + n..]));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(TrajectoryError::Format("times must be strictly increasing".into()));
        }
        let duration = match (times.first(), times.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        };
        Ok(ReferenceTrajectory {
            times,
            states,
            inputs: if m > 0 { Some(inputs) } else { None },
            sweep_angle: 0.0,
            duration,
        })
    }
}

/// Center of a point at arc fraction `a` along a constant-curvature backbone
/// of length `length` bent by `beta`, in the bending plane as `(x, z)`,
/// together with its derivative with respect to `beta`.
fn arc_point(length: f64, a: f64, beta: f64) -> ([f64; 2], [f64; 2]) {
    let phi = a * beta;
    if phi.abs() < 1e-3 {
        let (a2, b2) = (a * a, beta * beta);
        let x = length * (-a2 * beta / 2.0 + a2 * a2 * beta * b2 / 24.0);
        let z = length * (a - a2 * a * b2 / 6.0 + a2 * a2 * a * b2 * b2 / 120.0);
        let dx = length * (-a2 / 2.0 + a2 * a2 * b2 / 8.0);
        let dz = length * (-a2 * a * beta / 3.0 + a2 * a2 * a * beta * b2 / 30.0);
        return ([x, z], [dx, dz]);
    }
    let (s, c) = phi.sin_cos();
    let x = length * (c - 1.0) / beta;
    let z = length * s / beta;
    let dx = length * (-a * s * beta - (c - 1.0)) / (beta * beta);
    let dz = length * (a * c * beta - s) / (beta * beta);
    ([x, z], [dx, dz])
}

/// Bend angle and rate of the cosine ramp from 0 to `sweep` over `duration`.
pub fn bend_angle(sweep: f64, duration: f64, t: f64) -> (f64, f64) {
    let w = std::f64::consts::PI / duration;
    let t = t.clamp(0.0, duration);
    (0.5 * sweep * (1.0 - (w * t).cos()), 0.5 * sweep * w * (w * t).sin())
}

/// Reference state for bend angle `beta` and bend rate `rate`.
///
/// Vertebra `i` of `B` sits at arc length `i·spacing` on a circular backbone
/// in the X-Z plane and is turned counterclockwise by `i·β/B`.
pub fn bend_state(config: &SpineConfig, beta: f64, rate: f64) -> StateVector {
    let layout = config.layout();
    let nb = config.num_moving_vertebrae as f64;
    let length = nb * config.spacing;
    let mut x = StateVector::zeros(layout.dim);
    for (i, block) in layout.blocks.iter().enumerate() {
        let a = (i + 1) as f64 / nb;
        let ([px, pz], [dx, dz]) = arc_point(length, a, beta);
        let p = block.position.start;
        let v = block.velocity.start;
        match config.dimension {
            Dimension::Planar2D => {
                x[p] = px;
                x[p + 1] = pz;
                x[p + 2] = a * beta;
                x[v] = dx * rate;
                x[v + 1] = dz * rate;
                x[v + 2] = a * rate;
            }
            Dimension::Spatial3D => {
                // counterclockwise in X-Z is a negative pitch about +y
                x[p] = px;
                x[p + 2] = pz;
                x[p + 4] = -a * beta;
                x[v] = dx * rate;
                x[v + 2] = dz * rate;
                x[v + 4] = -a * rate;
            }
        }
    }
    x
}

/// Checks the first vertebra clears `h/2` and each following one clears its
/// predecessor by `min_gap`.
pub fn collision_violation(config: &SpineConfig, state: &StateVector) -> Option<String> {
    let layout = config.layout();
    let first = state[layout.blocks[0].z_index];
    if first < 0.5 * config.vertebra_height {
        return Some(format!("vertebra 1 at height {first} below {}", 0.5 * config.vertebra_height));
    }
    for (i, pair) in layout.blocks.windows(2).enumerate() {
        let gap = state[pair[1].z_index] - state[pair[0].z_index];
        if gap < config.min_gap {
            return Some(format!("vertebrae {} and {} only {gap} apart", i + 1, i + 2));
        }
    }
    None
}

/// Counterclockwise constant-curvature bend ramped from 0 to `sweep_angle`
/// over `duration`, sampled every `config.dt`.
pub fn generate_bend(config: &SpineConfig, sweep_angle: f64, duration: f64) -> Result<ReferenceTrajectory, TrajectoryError> {
    config.validate()?;
    if !(duration.is_finite() && duration > 0.0) {
        return Err(TrajectoryError::Duration(duration));
    }
    let steps = (duration / config.dt).round() as usize;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = k as f64 * config.dt;
        let (beta, rate) = bend_angle(sweep_angle, duration, t);
        let x = bend_state(config, beta, rate);
        if let Some(reason) = collision_violation(config, &x) {
            return Err(TrajectoryError::Collision { time: t, reason });
        }
        times.push(t);
        states.push(x);
    }
    Ok(ReferenceTrajectory { times, states, inputs: None, sweep_angle, duration })
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceSchedule {
    #[default]
    EveryStep,
    /// Only at the listed step indices.
    Impulses(Vec<usize>),
}

/// Zero-mean uniform noise added to the state: every coordinate of a group
/// is drawn from `[-magnitude, magnitude]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSpec {
    pub seed: u64,
    /// m
    pub position: f64,
    /// rad
    pub angle: f64,
    /// m/s and rad/s
    pub velocity: f64,
    #[serde(default)]
    pub schedule: DisturbanceSchedule,
}

impl Default for DisturbanceSpec {
    fn default() -> Self {
        DisturbanceSpec::none()
    }
}

impl DisturbanceSpec {
    pub fn none() -> Self {
        DisturbanceSpec { seed: 0, position: 0.0, angle: 0.0, velocity: 0.0, schedule: DisturbanceSchedule::EveryStep }
    }

    pub fn is_active(&self, step: usize) -> bool {
        let any = self.position > 0.0 || self.angle > 0.0 || self.velocity > 0.0;
        any && match &self.schedule {
            DisturbanceSchedule::EveryStep => true,
            DisturbanceSchedule::Impulses(steps) => steps.contains(&step),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [("position", self.position), ("angle", self.angle), ("velocity", self.velocity)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("disturbance {name} magnitude must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Adds the step's noise to `state`. The draw for step `k` depends only on
/// the seed and `k`.
pub fn apply_disturbance(state: &StateVector, spec: &DisturbanceSpec, layout: &StateLayout, step: usize) -> StateVector {
    let mut out = state.clone();
    if !spec.is_active(step) {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(step as u64);
    for block in &layout.blocks {
        for (range, magnitude) in
            [(block.position.clone(), spec.position), (block.angle.clone(), spec.angle), (block.velocity.clone(), spec.velocity)]
        {
            if magnitude > 0.0 {
                let dist = Uniform::new_inclusive(-magnitude, magnitude);
                for i in range {
                    out[i] += dist.sample(&mut rng);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_sweep_is_constant_home() {
        let config = SpineConfig::spatial_default();
        let traj = generate_bend(&config, 0.0, 0.5).unwrap();
        assert_eq!(traj.len(), 501);
        for x in &traj.states {
            assert_abs_diff_eq!(x.clone(), config.home_state(), epsilon = 1e-15);
        }
    }

    #[test]
    fn ramp_midpoint_is_half_sweep() {
        let (beta, _) = bend_angle(0.4, 2.0, 1.0);
        assert_abs_diff_eq!(beta, 0.2, epsilon = 1e-15);
        assert_eq!(bend_angle(0.4, 2.0, 2.0).0, 0.4);
        assert_eq!(bend_angle(0.4, 2.0, 0.0), (0.0, 0.0));
    }

    /// One segment of length s bent by β ends at (s(cos β - 1)/β, s sin β / β), turned by β.
    #[test]
    fn planar_arc_by_hand() {
        let config = SpineConfig::planar_default();
        let traj = generate_bend(&config, 0.3, 1.0).unwrap();
        let last = traj.states.last().unwrap();
        let s = config.spacing;
        assert_abs_diff_eq!(last[0], s * (0.3f64.cos() - 1.0) / 0.3, epsilon = 1e-14);
        assert_abs_diff_eq!(last[1], s * 0.3f64.sin() / 0.3, epsilon = 1e-14);
        assert_abs_diff_eq!(last[2], 0.3, epsilon = 1e-15);
        // the tip moves toward -x
        assert!(last[0] < 0.0);
    }

    #[test]
    fn spatial_top_vertebra_by_hand() {
        let config = SpineConfig::spatial_default();
        let beta = 0.25;
        let x = bend_state(&config, beta, 0.0);
        let layout = config.layout();
        let top = &layout.blocks[2];
        let l = 3.0 * config.spacing;
        assert_abs_diff_eq!(x[top.position.start], l * (beta.cos() - 1.0) / beta, epsilon = 1e-14);
        assert_abs_diff_eq!(x[top.z_index], l * beta.sin() / beta, epsilon = 1e-14);
        assert_abs_diff_eq!(x[top.angle.start + 1], -beta, epsilon = 1e-15);
    }

    #[test]
    fn series_branch_meets_closed_form() {
        for a in [1.0 / 3.0, 2.0 / 3.0, 1.0] {
            for beta in [9.9e-4, 1.01e-3] {
                let (p, d) = arc_point(0.375, a, beta);
                let (s, c) = (a * beta).sin_cos();
                assert_abs_diff_eq!(p[0], 0.375 * (c - 1.0) / beta, epsilon = 1e-12);
                assert_abs_diff_eq!(p[1], 0.375 * s / beta, epsilon = 1e-12);
                let h = 1e-7;
                let (pp, _) = arc_point(0.375, a, beta + h);
                let (pm, _) = arc_point(0.375, a, beta - h);
                assert_abs_diff_eq!(d[0], (pp[0] - pm[0]) / (2.0 * h), epsilon = 1e-7);
                assert_abs_diff_eq!(d[1], (pp[1] - pm[1]) / (2.0 * h), epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn velocities_match_finite_differences() {
        let config = SpineConfig::spatial_default();
        let traj = generate_bend(&config, 0.4, 1.0).unwrap();
        let layout = config.layout();
        let dt = config.dt;
        let mut worst: f64 = 0.0;
        for k in 1..traj.len() - 1 {
            let (prev, next, x) = (&traj.states[k - 1], &traj.states[k + 1], &traj.states[k]);
            for block in &layout.blocks {
                for (p, v) in block.pose().zip(block.velocity.clone()) {
                    worst = worst.max(((next[p] - prev[p]) / (2.0 * dt) - x[v]).abs());
                }
            }
        }
        // central-difference truncation is O(dt²)
        assert!(worst <= 10.0 * dt * dt, "worst mismatch {worst}");
    }

    #[test]
    fn steep_sweep_collides() {
        let config = SpineConfig::spatial_default();
        assert!(matches!(generate_bend(&config, 1.5, 1.0), Err(TrajectoryError::Collision { .. })));
        assert!(matches!(generate_bend(&config, 0.1, 0.0), Err(TrajectoryError::Duration(_))));
    }

    #[test]
    fn windows_clamp_to_the_end() {
        let config = SpineConfig::planar_default();
        let traj = generate_bend(&config, 0.2, 0.01).unwrap();
        let w = traj.state_window(8, 5);
        assert_eq!(w.len(), 5);
        assert_eq!(w[1], traj.states[9]);
        assert_eq!(w[4], traj.states[10]);
        assert!(traj.input_window(0, 2).is_none());
    }

    #[test]
    fn csv_round_trip() {
        let config = SpineConfig::planar_default();
        let traj = generate_bend(&config, 0.3, 0.02).unwrap().with_ik_inputs(&config, &IkSettings::default()).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let back = ReferenceTrajectory::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.times, traj.times);
        assert_eq!(back.states, traj.states);
        assert_eq!(back.inputs, traj.inputs);
    }

    #[test]
    fn zero_magnitude_leaves_state() {
        let config = SpineConfig::spatial_default();
        let x = config.home_state();
        let spec = DisturbanceSpec { seed: 9, ..DisturbanceSpec::none() };
        assert_eq!(apply_disturbance(&x, &spec, &config.layout(), 3), x);
    }

    #[test]
    fn same_seed_same_noise() {
        let config = SpineConfig::planar_default();
        let layout = config.layout();
        let x = config.home_state();
        let spec = DisturbanceSpec { seed: 42, velocity: 0.01, ..DisturbanceSpec::none() };
        let a: Vec<_> = (0..20).map(|k| apply_disturbance(&x, &spec, &layout, k)).collect();
        let b: Vec<_> = (0..20).map(|k| apply_disturbance(&x, &spec, &layout, k)).collect();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        // only the velocity group moves
        assert_eq!(a[3].rows(0, 3), x.rows(0, 3));
        let other = DisturbanceSpec { seed: 43, ..spec.clone() };
        assert_ne!(apply_disturbance(&x, &other, &layout, 0), a[0]);
    }

    #[test]
    fn impulses_only_on_listed_steps() {
        let config = SpineConfig::planar_default();
        let layout = config.layout();
        let x = config.home_state();
        let spec = DisturbanceSpec { seed: 1, position: 0.001, schedule: DisturbanceSchedule::Impulses(vec![5]), ..DisturbanceSpec::none() };
        assert_eq!(apply_disturbance(&x, &spec, &layout, 4), x);
        assert_ne!(apply_disturbance(&x, &spec, &layout, 5), x);
    }

    /// Uniform on [-a, a] has σ = a/√3; the sample mean must sit within 3σ/√n of 0.
    #[test]
    fn noise_is_zero_mean() {
        let config = SpineConfig::planar_default();
        let layout = config.layout();
        let zero = StateVector::zeros(layout.dim);
        let a = 0.02;
        let spec = DisturbanceSpec { seed: 7, position: a, angle: a, velocity: a, ..DisturbanceSpec::none() };
        let n = 100_000;
        let mut sum = StateVector::zeros(layout.dim);
        for k in 0..n {
            sum += apply_disturbance(&zero, &spec, &layout, k);
        }
        let bound = 3.0 * (a / 3f64.sqrt()) / (n as f64).sqrt();
        for v in (sum / n as f64).iter() {
            assert!(v.abs() <= bound, "mean {v} outside ±{bound}");
        }
    }
}
