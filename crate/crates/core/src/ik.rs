//! Static-equilibrium rest lengths by the force-density method.
//!
//! With force densities `q_i = T_i / ℓ_i` the cable force on a node is
//! `q_i (p_other - p_node)`, so force and moment balance of every moving
//! vertebra is linear in `q`. Among the densities that balance gravity with
//! every cable above a minimum density, the one of least Euclidean norm is
//! chosen; rest lengths then follow from the spring law.

use nalgebra::{DMatrix, DVector, Vector3};
use thiserror::Error;

use crate::model::{Dimension, InputVector, ModelError, SpineConfig, StateVector};
use crate::qp::{self, QpError, QpProblem, QpStatus};

#[derive(Debug, Error)]
pub enum IkError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no cable tensions above the minimum density hold this pose ({0})")]
    NoEquilibrium(QpStatus),
    #[error("cable {cable}: rest length {value} outside (0, {max}]")]
    RestLengthOutOfBounds { cable: usize, value: f64, max: f64 },
    #[error(transparent)]
    Qp(#[from] QpError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IkSettings {
    /// Lower bound on every force density, N/m.
    pub min_density: f64,
    /// Largest admissible rest length, m.
    pub max_rest_length: f64,
}

impl Default for IkSettings {
    fn default() -> Self {
        IkSettings { min_density: 0.5, max_rest_length: 0.3 }
    }
}

/// `equilibrium · q = load` with `q ≥ min_density`.
#[derive(Debug, Clone)]
pub struct ForceDensityProblem {
    /// One column per cable, one row per balance equation.
    pub equilibrium: DMatrix<f64>,
    pub load: DVector<f64>,
    pub min_density: f64,
}

#[derive(Debug, Clone)]
pub struct IkSolution {
    pub rest_lengths: InputVector,
    pub tensions: DVector<f64>,
    pub densities: DVector<f64>,
    pub lengths: DVector<f64>,
}

/// Least-norm force densities satisfying the balance equations.
pub fn solve_force_density(problem: &ForceDensityProblem) -> Result<DVector<f64>, IkError> {
    let n = problem.equilibrium.ncols();
    let mut qp = QpProblem::new(n);
    for i in 0..n {
        qp.add_square_penalty(i, 1.0, 0.0);
        qp.add_inequality(&[(i, -1.0)], -problem.min_density);
    }
    for (r, row) in problem.equilibrium.row_iter().enumerate() {
        let terms: Vec<(usize, f64)> = row.iter().enumerate().map(|(j, &v)| (j, v)).collect();
        qp.add_equality(&terms, problem.load[r]);
    }
    let sol = qp::solve(&qp, 1e-10, 200)?;
    if sol.status != QpStatus::Optimal {
        return Err(IkError::NoEquilibrium(sol.status));
    }
    Ok(sol.z.map(|q| q.max(problem.min_density)))
}

/// Balance equations of the moving vertebrae at `state`, plus the cable lengths.
///
/// Rows per vertebra are `(F_x, F_z, M)` for planar models and
/// `(F_x, F_y, F_z, M_x, M_y, M_z)` for spatial ones; velocities are ignored.
pub fn force_density_problem(
    config: &SpineConfig,
    state: &StateVector,
    min_density: f64,
) -> Result<(ForceDensityProblem, DVector<f64>), IkError> {
    config.validate()?;
    if state.len() != config.state_dim() {
        return Err(ModelError::StateDimension { expected: config.state_dim(), got: state.len() }.into());
    }
    let mut pose = state.clone();
    for block in config.layout().blocks {
        pose.rows_mut(block.velocity.start, block.velocity.len()).fill(0.0);
    }
    let bodies = config.bodies(&pose);
    let rows_per = match config.dimension {
        Dimension::Planar2D => 3,
        Dimension::Spatial3D => 6,
    };
    let nb = config.num_moving_vertebrae;
    let mut eq = DMatrix::zeros(rows_per * nb, config.num_cables());
    let mut lengths = DVector::zeros(config.num_cables());

    let mut add = |body: usize, col: usize, force: Vector3<f64>, torque: Vector3<f64>| {
        if body == 0 {
            return;
        }
        let r = (body - 1) * rows_per;
        match config.dimension {
            Dimension::Planar2D => {
                eq[(r, col)] += force.x;
                eq[(r + 1, col)] += force.z;
                eq[(r + 2, col)] -= torque.y;
            }
            Dimension::Spatial3D => {
                for k in 0..3 {
                    eq[(r + k, col)] += force[k];
                    eq[(r + 3 + k, col)] += torque[k];
                }
            }
        }
    };
    for (c, lo_body, up_body, lo_node, up_node) in config.cables() {
        let arm_lo = bodies[lo_body].rotation * config.node_offset(lo_node);
        let arm_up = bodies[up_body].rotation * config.node_offset(up_node);
        let span = (bodies[lo_body].position + arm_lo) - (bodies[up_body].position + arm_up);
        let length = span.norm();
        if !(length > 0.0) {
            return Err(ModelError::DegenerateCable { cable: c, value: length }.into());
        }
        lengths[c] = length;
        add(up_body, c, span, arm_up.cross(&span));
        add(lo_body, c, -span, -arm_lo.cross(&span));
    }

    let mut load = DVector::zeros(rows_per * nb);
    let vertical = match config.dimension {
        Dimension::Planar2D => 1,
        Dimension::Spatial3D => 2,
    };
    for i in 0..nb {
        load[i * rows_per + vertical] = config.vertebra_mass * config.gravity;
    }
    Ok((ForceDensityProblem { equilibrium: eq, load, min_density }, lengths))
}

/// Rest lengths holding the pose of `state` (velocities treated as zero) in
/// static equilibrium under gravity.
pub fn ik_rest_lengths(config: &SpineConfig, state: &StateVector, settings: &IkSettings) -> Result<IkSolution, IkError> {
    let (problem, lengths) = force_density_problem(config, state, settings.min_density)?;
    let densities = solve_force_density(&problem)?;
    let tensions = densities.component_mul(&lengths);
    let rest_lengths = &lengths - &tensions / config.cable_stiffness;
    if let Some((cable, &value)) = rest_lengths
        .iter()
        .enumerate()
        .find(|(_, &r)| !(r > 0.0 && r <= settings.max_rest_length))
    {
        return Err(IkError::RestLengthOutOfBounds { cable, value, max: settings.max_rest_length });
    }
    Ok(IkSolution { rest_lengths, tensions, densities, lengths })
}
