//! Cable-driven spine geometry and rigid-vertebra dynamics.
//!
//! The bottom vertebra is fixed at the origin. Each moving vertebra is a rigid
//! body whose cable attachment nodes sit at fixed offsets in its body frame.
//! Cables are parallel spring-dampers between a node on the lower vertebra and
//! a node on the upper vertebra of each adjacent pair; their rest lengths are
//! the control inputs.
//!
//! Planar models live in the X-Z plane with state `(x, z, θ, ẋ, ż, θ̇)` per
//! vertebra, θ counterclockwise (a positive θ tips the vertebra toward -x).
//! Spatial models use `(x, y, z, φ, θ, ψ)` plus their time derivatives, with
//! Z-Y-X Euler angles and the small-rotation approximation that Euler-angle
//! accelerations equal body torques divided by the principal inertias.

use std::ops::Range;

use nalgebra::{DVector, Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type StateVector = DVector<f64>;
pub type InputVector = DVector<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("state has dimension {got}, model expects {expected}")]
    StateDimension { expected: usize, got: usize },
    #[error("input has dimension {got}, model expects {expected}")]
    InputDimension { expected: usize, got: usize },
    #[error("cable {cable}: rest length {value} is negative")]
    NegativeRestLength { cable: usize, value: f64 },
    #[error("cable {cable}: length {value} is not positive")]
    DegenerateCable { cable: usize, value: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid spine configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Planar2D,
    Spatial3D,
}

impl Dimension {
    /// State entries per vertebra.
    pub fn block_size(self) -> usize {
        match self {
            Dimension::Planar2D => 6,
            Dimension::Spatial3D => 12,
        }
    }

    pub fn cables_per_pair(self) -> usize {
        match self {
            Dimension::Planar2D => 4,
            Dimension::Spatial3D => 8,
        }
    }

    fn coords(self) -> usize {
        match self {
            Dimension::Planar2D => 2,
            Dimension::Spatial3D => 3,
        }
    }
}

/// Geometric and physical parameters of a spine model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpineConfig {
    pub dimension: Dimension,
    pub num_moving_vertebrae: usize,
    /// kg
    pub vertebra_mass: f64,
    /// kg·m²; one entry for planar models, principal (x, y, z) for spatial.
    pub vertebra_inertia: Vec<f64>,
    /// Overall vertebra height h, m.
    pub vertebra_height: f64,
    /// Center-to-center distance of adjacent vertebrae in the home pose, m.
    pub spacing: f64,
    /// Attachment nodes in the body frame: `[x, z]` or `[x, y, z]`, m.
    pub node_offsets: Vec<Vec<f64>>,
    /// `[lower node, upper node]` for each cable of a vertebra pair.
    pub cable_routing: Vec<[usize; 2]>,
    /// N/m
    pub cable_stiffness: f64,
    /// N·s/m
    pub cable_damping: f64,
    /// m/s², acting along -z.
    pub gravity: f64,
    /// Integration step, s.
    pub dt: f64,
    /// Minimum vertical gap between adjacent moving vertebra centers, m.
    pub min_gap: f64,
}

impl SpineConfig {
    /// Single moving vertebra in the X-Z plane with two vertical and two
    /// saddle cables.
    pub fn planar_default() -> Self {
        let w = 0.1;
        let d = 0.075;
        SpineConfig {
            dimension: Dimension::Planar2D,
            num_moving_vertebrae: 1,
            vertebra_mass: 0.5,
            vertebra_inertia: vec![2.5e-3],
            vertebra_height: 2.0 * d,
            spacing: 0.125,
            // left, right (bottom corners) and the top node
            node_offsets: vec![vec![-w, -d], vec![w, -d], vec![0.0, d]],
            cable_routing: vec![[0, 0], [1, 1], [2, 0], [2, 1]],
            cable_stiffness: 500.0,
            cable_damping: 10.0,
            gravity: 9.81,
            dt: 0.001,
            min_gap: 0.1,
        }
    }

    /// Three moving vertebrae stacked on a fixed base, eight cables per pair.
    pub fn spatial_default() -> Self {
        let w = 0.1;
        let d = 0.075;
        SpineConfig {
            dimension: Dimension::Spatial3D,
            num_moving_vertebrae: 3,
            vertebra_mass: 0.5,
            vertebra_inertia: vec![2.5e-3, 2.5e-3, 4.0e-3],
            vertebra_height: 2.0 * d,
            spacing: 0.125,
            // two bottom nodes along x, two top nodes along y
            node_offsets: vec![
                vec![w, 0.0, -d],
                vec![-w, 0.0, -d],
                vec![0.0, w, d],
                vec![0.0, -w, d],
            ],
            cable_routing: vec![
                // vertical
                [0, 0],
                [1, 1],
                [2, 2],
                [3, 3],
                // saddle
                [2, 0],
                [2, 1],
                [3, 0],
                [3, 1],
            ],
            cable_stiffness: 500.0,
            cable_damping: 10.0,
            gravity: 9.81,
            dt: 0.001,
            min_gap: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        let positive = [
            ("dt", self.dt),
            ("cable_stiffness", self.cable_stiffness),
            ("vertebra_mass", self.vertebra_mass),
            ("vertebra_height", self.vertebra_height),
            ("spacing", self.spacing),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.cable_damping.is_finite() && self.cable_damping >= 0.0) {
            return bad(format!("cable_damping must be non-negative, got {}", self.cable_damping));
        }
        if !(self.gravity.is_finite() && self.min_gap.is_finite() && self.min_gap >= 0.0) {
            return bad("gravity and min_gap must be finite, min_gap non-negative".into());
        }
        if self.num_moving_vertebrae == 0 {
            return bad("num_moving_vertebrae must be at least 1".into());
        }
        let inertia_len = match self.dimension {
            Dimension::Planar2D => 1,
            Dimension::Spatial3D => 3,
        };
        if self.vertebra_inertia.len() != inertia_len
            || self.vertebra_inertia.iter().any(|&i| !(i.is_finite() && i > 0.0))
        {
            return bad(format!("vertebra_inertia needs {inertia_len} positive entries"));
        }
        let coords = self.dimension.coords();
        if self.node_offsets.len() < 2 {
            return bad("at least two attachment nodes are required".into());
        }
        for (i, node) in self.node_offsets.iter().enumerate() {
            if node.len() != coords || node.iter().any(|v| !v.is_finite()) {
                return bad(format!("node_offsets[{i}] must have {coords} finite coordinates"));
            }
            if node.iter().all(|&v| v == 0.0) {
                return bad(format!("node_offsets[{i}] coincides with the vertebra center"));
            }
        }
        let points: Vec<Vector3<f64>> = (0..self.node_offsets.len()).map(|i| self.node_offset(i)).collect();
        let spread = points
            .iter()
            .any(|p| points.iter().any(|q| (p - points[0]).cross(&(q - points[0])).norm() > 1e-12));
        if !spread {
            return bad("attachment nodes are collinear".into());
        }
        if self.cable_routing.len() != self.dimension.cables_per_pair() {
            return bad(format!(
                "{:?} spine needs {} cables per vertebra pair, got {}",
                self.dimension,
                self.dimension.cables_per_pair(),
                self.cable_routing.len()
            ));
        }
        for (c, &[lo, up]) in self.cable_routing.iter().enumerate() {
            if lo >= self.node_offsets.len() || up >= self.node_offsets.len() {
                return bad(format!("cable_routing[{c}] references a missing node"));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout::spine(self.dimension, self.num_moving_vertebrae)
    }

    pub fn state_dim(&self) -> usize {
        self.dimension.block_size() * self.num_moving_vertebrae
    }

    pub fn num_cables(&self) -> usize {
        self.cable_routing.len() * self.num_moving_vertebrae
    }

    /// Body-frame offset of node `i`, embedded in 3-D (`y = 0` for planar models).
    pub fn node_offset(&self, i: usize) -> Vector3<f64> {
        let n = &self.node_offsets[i];
        match self.dimension {
            Dimension::Planar2D => Vector3::new(n[0], 0.0, n[1]),
            Dimension::Spatial3D => Vector3::new(n[0], n[1], n[2]),
        }
    }

    /// Upright stack at rest, vertebra `i` centered at height `i * spacing`.
    pub fn home_state(&self) -> StateVector {
        let layout = self.layout();
        let mut state = StateVector::zeros(self.state_dim());
        for (i, block) in layout.blocks.iter().enumerate() {
            state[block.z_index] = (i + 1) as f64 * self.spacing;
        }
        state
    }

    fn check_state(&self, state: &StateVector) -> Result<(), ModelError> {
        if state.len() != self.state_dim() {
            return Err(ModelError::StateDimension { expected: self.state_dim(), got: state.len() });
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("state"));
        }
        Ok(())
    }

    fn check_input(&self, input: &InputVector) -> Result<(), ModelError> {
        if input.len() != self.num_cables() {
            return Err(ModelError::InputDimension { expected: self.num_cables(), got: input.len() });
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("input"));
        }
        if let Some((cable, &value)) = input.iter().enumerate().find(|(_, &v)| v < 0.0) {
            return Err(ModelError::NegativeRestLength { cable, value });
        }
        Ok(())
    }

    /// Pose and twist of every vertebra, index 0 being the fixed base.
    pub(crate) fn bodies(&self, state: &StateVector) -> Vec<BodyState> {
        let bs = self.dimension.block_size();
        let mut bodies = Vec::with_capacity(self.num_moving_vertebrae + 1);
        bodies.push(BodyState::fixed());
        for i in 0..self.num_moving_vertebrae {
            let s = &state.as_slice()[i * bs..(i + 1) * bs];
            bodies.push(match self.dimension {
                Dimension::Planar2D => BodyState::planar(s),
                Dimension::Spatial3D => BodyState::spatial(s),
            });
        }
        bodies
    }

    /// Iterates cables as `(global index, lower body, upper body, lower node, upper node)`.
    pub(crate) fn cables(&self) -> impl Iterator<Item = (usize, usize, usize, usize, usize)> + '_ {
        let per_pair = self.cable_routing.len();
        (0..self.num_moving_vertebrae).flat_map(move |pair| {
            self.cable_routing
                .iter()
                .enumerate()
                .map(move |(c, &[lo, up])| (pair * per_pair + c, pair, pair + 1, lo, up))
        })
    }
}

/// Index map of a stacked state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct StateLayout {
    pub blocks: Vec<StateBlock>,
    pub dim: usize,
}

/// Entries of one vertebra (or one body of a generic plant).
#[derive(Debug, Clone, PartialEq)]
pub struct StateBlock {
    pub position: Range<usize>,
    pub angle: Range<usize>,
    pub velocity: Range<usize>,
    /// Vertical position entry.
    pub z_index: usize,
}

impl StateBlock {
    /// Entry holding the vertical velocity.
    pub fn z_velocity_index(&self) -> usize {
        self.velocity.start + (self.z_index - self.position.start)
    }

    /// Position and angle entries together.
    pub fn pose(&self) -> Range<usize> {
        self.position.start..self.angle.end.max(self.position.end)
    }
}

impl StateLayout {
    pub fn spine(dimension: Dimension, vertebrae: usize) -> Self {
        let bs = dimension.block_size();
        let blocks = (0..vertebrae)
            .map(|i| {
                let o = i * bs;
                match dimension {
                    Dimension::Planar2D => StateBlock {
                        position: o..o + 2,
                        angle: o + 2..o + 3,
                        velocity: o + 3..o + 6,
                        z_index: o + 1,
                    },
                    Dimension::Spatial3D => StateBlock {
                        position: o..o + 3,
                        angle: o + 3..o + 6,
                        velocity: o + 6..o + 12,
                        z_index: o + 2,
                    },
                }
            })
            .collect();
        StateLayout { blocks, dim: bs * vertebrae }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BodyState {
    pub position: Vector3<f64>,
    pub rotation: Matrix3<f64>,
    pub velocity: Vector3<f64>,
    /// World-frame angular velocity.
    pub omega: Vector3<f64>,
}

impl BodyState {
    fn fixed() -> Self {
        BodyState {
            position: Vector3::zeros(),
            rotation: Matrix3::identity(),
            velocity: Vector3::zeros(),
            omega: Vector3::zeros(),
        }
    }

    // Counterclockwise θ in the X-Z plane is a rotation of -θ about +y.
    fn planar(s: &[f64]) -> Self {
        BodyState {
            position: Vector3::new(s[0], 0.0, s[1]),
            rotation: *Rotation3::from_axis_angle(&Vector3::y_axis(), -s[2]).matrix(),
            velocity: Vector3::new(s[3], 0.0, s[4]),
            omega: Vector3::new(0.0, -s[5], 0.0),
        }
    }

    fn spatial(s: &[f64]) -> Self {
        let (phi, theta, psi) = (s[3], s[4], s[5]);
        let (dphi, dtheta, dpsi) = (s[9], s[10], s[11]);
        // R = Rz(ψ) Ry(θ) Rx(φ)
        let rotation = *Rotation3::from_euler_angles(phi, theta, psi).matrix();
        let (sp, cp) = psi.sin_cos();
        let (st, ct) = theta.sin_cos();
        let omega = Vector3::new(
            ct * cp * dphi - sp * dtheta,
            ct * sp * dphi + cp * dtheta,
            -st * dphi + dpsi,
        );
        BodyState {
            position: Vector3::new(s[0], s[1], s[2]),
            rotation,
            velocity: Vector3::new(s[6], s[7], s[8]),
            omega,
        }
    }

    fn node(&self, offset: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let arm = self.rotation * offset;
        (self.position + arm, self.velocity + self.omega.cross(&arm))
    }
}

/// World coordinates of the two ends of one cable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CableEndpoints {
    /// Node on the lower vertebra (the fixed base for the first pair).
    pub anchor: Vector3<f64>,
    /// Node on the upper vertebra.
    pub moving: Vector3<f64>,
}

/// Cable attachment points in world coordinates, in input order. Planar
/// models report `y = 0`.
pub fn cable_endpoints(config: &SpineConfig, state: &StateVector) -> Result<Vec<CableEndpoints>, ModelError> {
    config.check_state(state)?;
    let bodies = config.bodies(state);
    Ok(config
        .cables()
        .map(|(_, lo_body, up_body, lo_node, up_node)| CableEndpoints {
            anchor: bodies[lo_body].node(&config.node_offset(lo_node)).0,
            moving: bodies[up_body].node(&config.node_offset(up_node)).0,
        })
        .collect())
}

/// Spring-damper tension, saturated at zero for a slack cable.
pub fn cable_tension(
    length: f64,
    length_rate: f64,
    rest_length: f64,
    stiffness: f64,
    damping: f64,
) -> Result<f64, ModelError> {
    if !(length > 0.0) {
        return Err(ModelError::DegenerateCable { cable: 0, value: length });
    }
    if rest_length < 0.0 || !rest_length.is_finite() {
        return Err(ModelError::NegativeRestLength { cable: 0, value: rest_length });
    }
    Ok((stiffness * (length - rest_length) + damping * length_rate).max(0.0))
}

/// Per-cable geometry and tension at a given state and input.
#[derive(Debug, Clone)]
pub struct CableState {
    pub length: f64,
    pub length_rate: f64,
    pub tension: f64,
}

pub fn cable_states(config: &SpineConfig, state: &StateVector, input: &InputVector) -> Result<Vec<CableState>, ModelError> {
    config.check_state(state)?;
    config.check_input(input)?;
    let bodies = config.bodies(state);
    config
        .cables()
        .map(|(c, lo_body, up_body, lo_node, up_node)| {
            let (p_lo, v_lo) = bodies[lo_body].node(&config.node_offset(lo_node));
            let (p_up, v_up) = bodies[up_body].node(&config.node_offset(up_node));
            let span = p_lo - p_up;
            let length = span.norm();
            if !(length > 0.0) {
                return Err(ModelError::DegenerateCable { cable: c, value: length });
            }
            let length_rate = span.dot(&(v_lo - v_up)) / length;
            let tension = cable_tension(length, length_rate, input[c], config.cable_stiffness, config.cable_damping)
                .map_err(|e| match e {
                    ModelError::NegativeRestLength { value, .. } => ModelError::NegativeRestLength { cable: c, value },
                    other => other,
                })?;
            Ok(CableState { length, length_rate, tension })
        })
        .collect()
}

/// Net force and torque (about each body's center) from the cables, world frame.
pub(crate) fn cable_wrenches(
    config: &SpineConfig,
    bodies: &[BodyState],
    input: &InputVector,
) -> Result<Vec<(Vector3<f64>, Vector3<f64>)>, ModelError> {
    let mut wrenches = vec![(Vector3::zeros(), Vector3::zeros()); bodies.len()];
    for (c, lo_body, up_body, lo_node, up_node) in config.cables() {
        let arm_lo = bodies[lo_body].rotation * config.node_offset(lo_node);
        let arm_up = bodies[up_body].rotation * config.node_offset(up_node);
        let p_lo = bodies[lo_body].position + arm_lo;
        let p_up = bodies[up_body].position + arm_up;
        let v_lo = bodies[lo_body].velocity + bodies[lo_body].omega.cross(&arm_lo);
        let v_up = bodies[up_body].velocity + bodies[up_body].omega.cross(&arm_up);
        let span = p_lo - p_up;
        let length = span.norm();
        if !(length > 0.0) {
            return Err(ModelError::DegenerateCable { cable: c, value: length });
        }
        let dir = span / length;
        let rate = dir.dot(&(v_lo - v_up));
        let rest = input[c];
        if rest < 0.0 {
            return Err(ModelError::NegativeRestLength { cable: c, value: rest });
        }
        let tension = (config.cable_stiffness * (length - rest) + config.cable_damping * rate).max(0.0);
        if tension == 0.0 {
            continue;
        }
        // pulls the upper node toward the lower node and vice versa
        let force_up = dir * tension;
        wrenches[up_body].0 += force_up;
        wrenches[up_body].1 += arm_up.cross(&force_up);
        wrenches[lo_body].0 -= force_up;
        wrenches[lo_body].1 -= arm_lo.cross(&force_up);
    }
    Ok(wrenches)
}

/// Continuous-time state derivative.
pub fn dynamics(config: &SpineConfig, state: &StateVector, input: &InputVector) -> Result<StateVector, ModelError> {
    config.check_state(state)?;
    config.check_input(input)?;
    let bodies = config.bodies(state);
    let wrenches = cable_wrenches(config, &bodies, input)?;
    let bs = config.dimension.block_size();
    let m = config.vertebra_mass;
    let mut deriv = StateVector::zeros(state.len());
    for i in 0..config.num_moving_vertebrae {
        let o = i * bs;
        let (force, torque) = &wrenches[i + 1];
        match config.dimension {
            Dimension::Planar2D => {
                deriv[o] = state[o + 3];
                deriv[o + 1] = state[o + 4];
                deriv[o + 2] = state[o + 5];
                deriv[o + 3] = force.x / m;
                deriv[o + 4] = force.z / m - config.gravity;
                deriv[o + 5] = -torque.y / config.vertebra_inertia[0];
            }
            Dimension::Spatial3D => {
                for k in 0..6 {
                    deriv[o + k] = state[o + 6 + k];
                }
                deriv[o + 6] = force.x / m;
                deriv[o + 7] = force.y / m;
                deriv[o + 8] = force.z / m - config.gravity;
                for k in 0..3 {
                    deriv[o + 9 + k] = torque[k] / config.vertebra_inertia[k];
                }
            }
        }
    }
    Ok(deriv)
}

/// One explicit Euler step of length `config.dt`.
pub fn step(config: &SpineConfig, state: &StateVector, input: &InputVector) -> Result<StateVector, ModelError> {
    Ok(state + dynamics(config, state, input)? * config.dt)
}

/// Kinetic plus elastic plus gravitational energy.
pub fn mechanical_energy(config: &SpineConfig, state: &StateVector, input: &InputVector) -> Result<f64, ModelError> {
    let cables = cable_states(config, state, input)?;
    let elastic: f64 = cables
        .iter()
        .zip(input.iter())
        .map(|(c, &rest)| {
            let stretch = (c.length - rest).max(0.0);
            0.5 * config.cable_stiffness * stretch * stretch
        })
        .sum();
    let bodies = config.bodies(state);
    let m = config.vertebra_mass;
    let inertia = match config.dimension {
        Dimension::Planar2D => Vector3::repeat(config.vertebra_inertia[0]),
        Dimension::Spatial3D => Vector3::from_column_slice(&config.vertebra_inertia),
    };
    let body: f64 = bodies
        .iter()
        .skip(1)
        .map(|b| {
            0.5 * m * b.velocity.norm_squared()
                + 0.5 * b.omega.component_mul(&b.omega).dot(&inertia)
                + m * config.gravity * b.position.z
        })
        .sum();
    Ok(elastic + body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn default_configs_are_valid() {
        SpineConfig::planar_default().validate().unwrap();
        SpineConfig::spatial_default().validate().unwrap();
        assert_eq!(SpineConfig::planar_default().num_cables(), 4);
        assert_eq!(SpineConfig::spatial_default().num_cables(), 24);
        assert_eq!(SpineConfig::spatial_default().state_dim(), 36);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = SpineConfig::planar_default();
        c.dt = 0.0;
        assert!(c.validate().is_err());
        let mut c = SpineConfig::planar_default();
        c.cable_routing.pop();
        assert!(c.validate().is_err());
        let mut c = SpineConfig::planar_default();
        c.node_offsets = vec![vec![0.1, 0.0], vec![0.2, 0.0], vec![-0.1, 0.0]];
        assert!(c.validate().is_err());
        let mut c = SpineConfig::spatial_default();
        c.node_offsets[1] = vec![0.0, 0.0, 0.0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn spatial_z_indices_match_stacked_convention() {
        let layout = SpineConfig::spatial_default().layout();
        let z: Vec<usize> = layout.blocks.iter().map(|b| b.z_index).collect();
        // entries 3, 15, 27 counting from one
        assert_eq!(z, vec![2, 14, 26]);
    }

    #[test]
    fn home_endpoints_are_nominal_offsets() {
        for config in [SpineConfig::planar_default(), SpineConfig::spatial_default()] {
            let ends = cable_endpoints(&config, &config.home_state()).unwrap();
            for ((_, lo_body, up_body, lo, up), e) in config.cables().zip(&ends) {
                let lift = |b: usize| Vector3::new(0.0, 0.0, b as f64 * config.spacing);
                assert_abs_diff_eq!(e.anchor, config.node_offset(lo) + lift(lo_body), epsilon = 1e-15);
                assert_abs_diff_eq!(e.moving, config.node_offset(up) + lift(up_body), epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn translation_shifts_moving_endpoints() {
        let config = SpineConfig::planar_default();
        let home = config.home_state();
        let mut moved = home.clone();
        moved[0] += 0.1;
        let a = cable_endpoints(&config, &home).unwrap();
        let b = cable_endpoints(&config, &moved).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert_abs_diff_eq!(q.moving - p.moving, Vector3::new(0.1, 0.0, 0.0), epsilon = 1e-15);
            assert_eq!(p.anchor, q.anchor);
        }
    }

    #[test]
    fn quarter_turn_rotates_offsets_by_hand() {
        let config = SpineConfig::planar_default();
        let mut state = config.home_state();
        state[2] = std::f64::consts::FRAC_PI_2;
        let ends = cable_endpoints(&config, &state).unwrap();
        // counterclockwise quarter turn in (x, z): (a, b) -> (-b, a)
        for ((_, _, _, _, up), e) in config.cables().zip(&ends) {
            let n = &config.node_offsets[up];
            let expected = Vector3::new(-n[1], 0.0, n[0] + config.spacing);
            assert_abs_diff_eq!(e.moving, expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn tension_cases() {
        assert_eq!(cable_tension(0.1, 0.0, 0.1, 100.0, 0.0).unwrap(), 0.0);
        assert_eq!(cable_tension(0.1, 0.0, 0.2, 100.0, 5.0).unwrap(), 0.0);
        assert_abs_diff_eq!(cable_tension(0.15, 0.0, 0.10, 100.0, 0.0).unwrap(), 5.0, epsilon = 1e-12);
        // stretched but shortening fast enough to go slack
        assert_eq!(cable_tension(0.15, -1.0, 0.10, 100.0, 10.0).unwrap(), 0.0);
        assert!(cable_tension(0.0, 0.0, 0.1, 100.0, 0.0).is_err());
        assert!(cable_tension(0.1, 0.0, -0.01, 100.0, 0.0).is_err());
        // zero rest length is a fully taut cable
        assert_abs_diff_eq!(cable_tension(0.1, 0.0, 0.0, 100.0, 0.0).unwrap(), 10.0, epsilon = 1e-12);
    }

    #[test]
    fn slack_cables_leave_only_gravity() {
        for config in [SpineConfig::planar_default(), SpineConfig::spatial_default()] {
            let state = config.home_state();
            let input = InputVector::from_element(config.num_cables(), 0.3);
            let ends = cable_endpoints(&config, &state).unwrap();
            assert!(ends.iter().all(|e| (e.anchor - e.moving).norm() < 0.3));
            let deriv = dynamics(&config, &state, &input).unwrap();
            for block in config.layout().blocks {
                for i in block.velocity.clone() {
                    let expected = if i == block.z_velocity_index() {
                        -config.gravity
                    } else {
                        0.0
                    };
                    assert_abs_diff_eq!(deriv[i], expected, epsilon = 1e-15);
                }
            }
        }
    }

    #[test]
    fn planar_mirror_symmetry() {
        let config = SpineConfig::planar_default();
        let state = StateVector::from_vec(vec![0.01, 0.12, 0.05, 0.2, -0.1, 0.3]);
        let input = InputVector::from_vec(vec![0.11, 0.115, 0.09, 0.095]);
        let mirrored = StateVector::from_vec(vec![-0.01, 0.12, -0.05, -0.2, -0.1, -0.3]);
        // left and right cables swap
        let swapped = InputVector::from_vec(vec![0.115, 0.11, 0.095, 0.09]);
        let a = dynamics(&config, &state, &input).unwrap();
        let b = dynamics(&config, &mirrored, &swapped).unwrap();
        assert_abs_diff_eq!(a[3], -b[3], epsilon = 1e-12);
        assert_abs_diff_eq!(a[4], b[4], epsilon = 1e-12);
        assert_abs_diff_eq!(a[5], -b[5], epsilon = 1e-12);
    }

    #[test]
    fn symmetric_pose_has_no_lateral_force_or_moment() {
        let mut config = SpineConfig::planar_default();
        config.gravity = 0.0;
        let state = StateVector::from_vec(vec![0.0, 0.118, 0.0, 0.0, 0.0, 0.0]);
        let input = InputVector::from_vec(vec![0.1, 0.1, 0.08, 0.08]);
        let d = dynamics(&config, &state, &input).unwrap();
        assert!(d[3].abs() <= 1e-10 && d[5].abs() <= 1e-10);
        assert!(d[4].abs() > 1.0);
    }

    #[test]
    fn step_uses_config_dt() {
        let config = SpineConfig::planar_default();
        assert_eq!(config.dt, 0.001);
        let state = config.home_state();
        let input = InputVector::from_element(4, 0.1);
        let next = step(&config, &state, &input).unwrap();
        let deriv = dynamics(&config, &state, &input).unwrap();
        assert_abs_diff_eq!(next, &state + deriv * 0.001, epsilon = 1e-15);
    }

    #[test]
    fn dimension_errors() {
        let config = SpineConfig::planar_default();
        let short = StateVector::zeros(5);
        assert!(matches!(cable_endpoints(&config, &short), Err(ModelError::StateDimension { .. })));
        let input = InputVector::from_element(3, 0.1);
        assert!(matches!(
            dynamics(&config, &config.home_state(), &input),
            Err(ModelError::InputDimension { .. })
        ));
        let negative = InputVector::from_vec(vec![0.1, -0.1, 0.1, 0.1]);
        assert!(matches!(
            step(&config, &config.home_state(), &negative),
            Err(ModelError::NegativeRestLength { cable: 1, .. })
        ));
    }
}
