//! Finite-horizon optimal control problems posed as sparse QPs.
//!
//! Both builders stack the predicted states and the inputs into a single
//! decision vector and keep the affine dynamics as equality constraints. The
//! state variables are deviations `x_k - r_k` from the reference window, which
//! keeps steep stage weights from swamping the objective with large constants.
//! The smoothing controller additionally carries one epigraph slack per stage
//! for its ∞-norm input-rate cost.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linearize::AffineModel;
use crate::model::{Dimension, InputVector, StateLayout, StateVector};
use crate::qp::{self, QpError, QpProblem, QpStatus};

#[derive(Debug, Error)]
pub enum CftocError {
    #[error("{what}: expected length {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("reference window holds {got} entries, horizon needs {needed}")]
    ShortWindow { got: usize, needed: usize },
    #[error("invalid controller settings: {0}")]
    InvalidConfig(String),
    #[error("initial height {z} is below the collision bound {bound}")]
    InfeasibleStart { z: f64, bound: f64 },
    #[error("no usable input: solver reported {0}")]
    NotOptimal(QpStatus),
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// Weights of the smoothing controller. `w1..w3` bound input changes,
/// `w4..w6` bound per-step pose changes of vertebrae 1..3, `w7` is the
/// collision margin, `w8` weighs the input-rate ∞-norm, `w9`/`w10` weigh
/// position/angle tracking and `w11` the pose rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothingControllerConfig {
    #[serde(rename = "N")]
    pub horizon: usize,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub w5: f64,
    pub w6: f64,
    pub w7: f64,
    pub w8: f64,
    pub w9: f64,
    pub w10: f64,
    pub w11: f64,
    pub u_min: f64,
    pub u_max: f64,
}

impl Default for SmoothingControllerConfig {
    fn default() -> Self {
        SmoothingControllerConfig {
            horizon: 10,
            w1: 0.02,
            w2: 0.02,
            w3: 0.02,
            w4: 0.005,
            w5: 0.005,
            w6: 0.005,
            w7: 0.1,
            w8: 1.0,
            w9: 25.0,
            w10: 10.0,
            w11: 5.0,
            u_min: 0.0,
            u_max: 0.12,
        }
    }
}

impl SmoothingControllerConfig {
    pub fn validate(&self) -> Result<(), CftocError> {
        let weights = [
            self.w1, self.w2, self.w3, self.w4, self.w5, self.w6, self.w7, self.w8, self.w9, self.w10, self.w11,
        ];
        if self.horizon < 1 {
            return Err(CftocError::InvalidConfig("N must be at least 1".into()));
        }
        if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(CftocError::InvalidConfig(format!("w{} must be finite and non-negative", i + 1)));
        }
        if !(self.w7 > 0.0) {
            return Err(CftocError::InvalidConfig("w7 must be positive".into()));
        }
        check_bounds(self.u_min, self.u_max)
    }
}

/// Weights and bounds of the reference-input controller. `Q`, `P` and `R` are
/// diagonals; a single entry is broadcast to every coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceControllerConfig {
    #[serde(rename = "N")]
    pub horizon: usize,
    #[serde(rename = "Q")]
    pub q: Vec<f64>,
    #[serde(rename = "P")]
    pub p: Vec<f64>,
    #[serde(rename = "R")]
    pub r: Vec<f64>,
    pub u_min: f64,
    pub u_max: f64,
    /// Vertebra height; the state at `z_index` is kept at or above `h/2`.
    pub h: f64,
    /// State coordinate bounded below by `h/2`, `None` for no collision bound.
    #[serde(skip, default = "default_z_index")]
    pub z_index: Option<usize>,
}

fn default_z_index() -> Option<usize> {
    Some(1)
}

impl Default for ReferenceControllerConfig {
    fn default() -> Self {
        ReferenceControllerConfig {
            horizon: 4,
            q: vec![1.0],
            p: vec![1.0],
            r: vec![2.0],
            u_min: 0.0,
            u_max: 0.3,
            h: 0.15,
            z_index: default_z_index(),
        }
    }
}

impl ReferenceControllerConfig {
    pub fn validate(&self) -> Result<(), CftocError> {
        if self.horizon < 1 {
            return Err(CftocError::InvalidConfig("N must be at least 1".into()));
        }
        for (name, d) in [("Q", &self.q), ("P", &self.p), ("R", &self.r)] {
            if d.is_empty() || d.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                return Err(CftocError::InvalidConfig(format!("{name} must be a non-empty, non-negative diagonal")));
            }
        }
        if !(self.h.is_finite() && self.h > 0.0) {
            return Err(CftocError::InvalidConfig("h must be positive".into()));
        }
        check_bounds(self.u_min, self.u_max)
    }

    fn diagonal(&self, which: &'static str, d: &[f64], len: usize) -> Result<Vec<f64>, CftocError> {
        match d.len() {
            1 => Ok(vec![d[0]; len]),
            l if l == len => Ok(d.to_vec()),
            got => Err(CftocError::Dimension { what: which, expected: len, got }),
        }
    }
}

fn check_bounds(lo: f64, hi: f64) -> Result<(), CftocError> {
    if lo.is_finite() && hi.is_finite() && lo < hi {
        Ok(())
    } else {
        Err(CftocError::InvalidConfig(format!("need u_min < u_max, got [{lo}, {hi}]")))
    }
}

/// Offsets of the stacked decision vector `[x_0..x_N, u_0..u_{M-1}, s_0..s_{S-1}]`,
/// where the `x_k` entries hold deviations from the reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HorizonLayout {
    pub horizon: usize,
    pub state_dim: usize,
    pub input_dim: usize,
    pub num_inputs: usize,
    pub num_slacks: usize,
}

impl HorizonLayout {
    pub fn x(&self, k: usize) -> usize {
        debug_assert!(k <= self.horizon);
        k * self.state_dim
    }

    pub fn u(&self, k: usize) -> usize {
        debug_assert!(k < self.num_inputs);
        (self.horizon + 1) * self.state_dim + k * self.input_dim
    }

    pub fn s(&self, k: usize) -> usize {
        debug_assert!(k < self.num_slacks);
        (self.horizon + 1) * self.state_dim + self.num_inputs * self.input_dim + k
    }

    pub fn num_vars(&self) -> usize {
        (self.horizon + 1) * self.state_dim + self.num_inputs * self.input_dim + self.num_slacks
    }
}

/// A built CFTOC together with what is needed to interpret its solution.
#[derive(Debug, Clone)]
pub struct HorizonProblem {
    pub qp: QpProblem,
    pub layout: HorizonLayout,
    pub model: AffineModel,
    pub initial_state: StateVector,
    pub u_min: f64,
    pub u_max: f64,
}

#[derive(Debug, Clone)]
pub struct HorizonSolution {
    pub status: QpStatus,
    pub inputs: Vec<InputVector>,
    /// `x_0..x_N` rolled out through the affine model from the initial state.
    pub states: Vec<StateVector>,
    pub slacks: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub u_min: f64,
    pub u_max: f64,
}

fn check_model(model: &AffineModel, state: &StateVector) -> Result<(), CftocError> {
    let n = model.a.nrows();
    if model.a.ncols() != n || model.b.nrows() != n || model.c.len() != n {
        return Err(CftocError::Dimension { what: "affine model", expected: n, got: model.b.nrows() });
    }
    if state.len() != n {
        return Err(CftocError::Dimension { what: "initial state", expected: n, got: state.len() });
    }
    Ok(())
}

fn check_window<T: AsRef<[f64]>>(window: &[T], needed: usize, dim: usize, what: &'static str) -> Result<(), CftocError> {
    if window.len() < needed {
        return Err(CftocError::ShortWindow { got: window.len(), needed });
    }
    if let Some(v) = window.iter().find(|v| v.as_ref().len() != dim) {
        return Err(CftocError::Dimension { what, expected: dim, got: v.as_ref().len() });
    }
    Ok(())
}

/// `x_0 = ξ_t` and `x_{k+1} = A x_k + B u_k + c` for `k < N`, in deviation
/// variables `y_k = x_k - r_k`.
fn add_dynamics(qp: &mut QpProblem, layout: &HorizonLayout, model: &AffineModel, state: &StateVector, reference: &[StateVector]) {
    let n = layout.state_dim;
    for i in 0..n {
        qp.add_equality(&[(layout.x(0) + i, 1.0)], state[i] - reference[0][i]);
    }
    let mut row = Vec::with_capacity(2 * n + layout.input_dim);
    for k in 0..layout.horizon {
        let rhs = &model.c + &model.a * &reference[k] - &reference[k + 1];
        for i in 0..n {
            row.clear();
            row.push((layout.x(k + 1) + i, 1.0));
            row.extend(model.a.row(i).iter().enumerate().map(|(j, &v)| (layout.x(k) + j, -v)));
            row.extend(model.b.row(i).iter().enumerate().map(|(j, &v)| (layout.u(k) + j, -v)));
            qp.add_equality(&row, rhs[i]);
        }
    }
}

/// `-bound ≤ z_i - z_j + offset ≤ bound`; without `j`, `-bound ≤ z_i + offset ≤ bound`.
fn add_band(qp: &mut QpProblem, i: usize, j: Option<usize>, offset: f64, bound: f64) {
    match j {
        Some(j) => {
            qp.add_inequality(&[(i, 1.0), (j, -1.0)], bound - offset);
            qp.add_inequality(&[(i, -1.0), (j, 1.0)], bound + offset);
        }
        None => {
            qp.add_inequality(&[(i, 1.0)], bound - offset);
            qp.add_inequality(&[(i, -1.0)], bound + offset);
        }
    }
}

/// Adds `weight·(z_i - z_j + offset)²` to the objective.
fn add_shifted_difference_penalty(qp: &mut QpProblem, i: usize, j: usize, weight: f64, offset: f64) {
    if weight == 0.0 {
        return;
    }
    qp.add_difference_penalty(i, j, weight);
    qp.linear[i] += 2.0 * weight * offset;
    qp.linear[j] -= 2.0 * weight * offset;
    qp.constant += weight * offset * offset;
}

fn add_input_box(qp: &mut QpProblem, layout: &HorizonLayout, lo: f64, hi: f64) {
    for k in 0..layout.num_inputs {
        for j in 0..layout.input_dim {
            let v = layout.u(k) + j;
            qp.add_inequality(&[(v, 1.0)], hi);
            qp.add_inequality(&[(v, -1.0)], -lo);
        }
    }
}

/// `w^k` with `0^0` taken as 0, so unweighted coordinates stay unweighted.
pub fn stage_weight(w: f64, k: usize) -> f64 {
    if w == 0.0 {
        0.0
    } else {
        w.powi(k as i32)
    }
}

/// Smoothing CFTOC for the three-vertebra spatial spine.
///
/// Inputs `u_0..u_N` and states `x_0..x_N`; the reference window must hold at
/// least `N + 1` states starting at the current time.
pub fn build_smoothing_cftoc(
    model: &AffineModel,
    state: &StateVector,
    prev_input: &InputVector,
    reference: &[StateVector],
    cfg: &SmoothingControllerConfig,
) -> Result<HorizonProblem, CftocError> {
    cfg.validate()?;
    check_model(model, state)?;
    let spine = StateLayout::spine(Dimension::Spatial3D, 3);
    let n = model.a.nrows();
    let m = model.b.ncols();
    if n != spine.dim {
        return Err(CftocError::Dimension { what: "state", expected: spine.dim, got: n });
    }
    if prev_input.len() != m {
        return Err(CftocError::Dimension { what: "previous input", expected: m, got: prev_input.len() });
    }
    let horizon = cfg.horizon;
    check_window(reference, horizon + 1, n, "reference state")?;

    let layout = HorizonLayout { horizon, state_dim: n, input_dim: m, num_inputs: horizon + 1, num_slacks: horizon + 1 };
    let mut qp = QpProblem::new(layout.num_vars());
    add_dynamics(&mut qp, &layout, model, state, reference);
    add_input_box(&mut qp, &layout, cfg.u_min, cfg.u_max);

    // input smoothing
    for j in 0..m {
        add_band(&mut qp, layout.u(0) + j, None, -prev_input[j], cfg.w1);
        for k in 1..=horizon {
            let bound = if k == horizon { cfg.w3 } else { cfg.w2 };
            add_band(&mut qp, layout.u(k) + j, Some(layout.u(0) + j), 0.0, bound);
        }
    }

    // pose smoothing and collision avoidance from the first predicted state on
    let pose_bounds = [cfg.w4, cfg.w5, cfg.w6];
    for k in 1..=horizon {
        let (r, rp) = (&reference[k], &reference[k - 1]);
        for (block, &bound) in spine.blocks.iter().zip(&pose_bounds) {
            for i in block.pose() {
                add_band(&mut qp, layout.x(k) + i, Some(layout.x(k - 1) + i), r[i] - rp[i], bound);
            }
        }
        for pair in spine.blocks.windows(2) {
            let (lo, hi) = (pair[0].z_index, pair[1].z_index);
            qp.add_inequality(&[(layout.x(k) + lo, 1.0), (layout.x(k) + hi, -1.0)], r[hi] - r[lo] - cfg.w7);
        }
    }

    // s_k ≥ |u_k - u_{k-1}| coordinate-wise, with u_{-1} the previous input
    for k in 0..=horizon {
        let s = layout.s(k);
        for j in 0..m {
            let u = layout.u(k) + j;
            if k == 0 {
                qp.add_inequality(&[(u, 1.0), (s, -1.0)], prev_input[j]);
                qp.add_inequality(&[(u, -1.0), (s, -1.0)], -prev_input[j]);
            } else {
                let up = layout.u(k - 1) + j;
                qp.add_inequality(&[(u, 1.0), (up, -1.0), (s, -1.0)], 0.0);
                qp.add_inequality(&[(u, -1.0), (up, 1.0), (s, -1.0)], 0.0);
            }
        }
        qp.linear[s] += cfg.w8;
    }

    // tracking and pose-rate costs
    let mut q_diag = vec![0.0; n];
    let mut s_diag = vec![0.0; n];
    for block in &spine.blocks {
        for i in block.position.clone() {
            q_diag[i] = cfg.w9;
        }
        for i in block.angle.clone() {
            q_diag[i] = cfg.w10;
        }
        for i in block.pose() {
            s_diag[i] = cfg.w11;
        }
    }
    for k in 0..=horizon {
        for i in 0..n {
            qp.add_square_penalty(layout.x(k) + i, stage_weight(q_diag[i], k), 0.0);
            if k > 0 {
                let offset = reference[k][i] - reference[k - 1][i];
                add_shifted_difference_penalty(&mut qp, layout.x(k) + i, layout.x(k - 1) + i, stage_weight(s_diag[i], k), offset);
            }
        }
    }

    Ok(HorizonProblem { qp, layout, model: model.clone(), initial_state: state.clone(), u_min: cfg.u_min, u_max: cfg.u_max })
}

/// Reference-input CFTOC: stage costs on `x_0..x_{N-1}` and `u_0..u_{N-1}`,
/// terminal cost on `x_N`, and the collision bound on every predicted state.
///
/// Refuses a start below the collision bound, since `x_0 = ξ_t` would
/// contradict it.
pub fn build_reference_cftoc(
    model: &AffineModel,
    state: &StateVector,
    reference: &[StateVector],
    input_reference: &[InputVector],
    cfg: &ReferenceControllerConfig,
) -> Result<HorizonProblem, CftocError> {
    if let Some(zi) = cfg.z_index {
        let bound = 0.5 * cfg.h;
        if zi < state.len() && state[zi] < bound {
            return Err(CftocError::InfeasibleStart { z: state[zi], bound });
        }
    }
    build_reference_cftoc_unchecked(model, state, reference, input_reference, cfg)
}

/// [`build_reference_cftoc`] without the start check.
pub fn build_reference_cftoc_unchecked(
    model: &AffineModel,
    state: &StateVector,
    reference: &[StateVector],
    input_reference: &[InputVector],
    cfg: &ReferenceControllerConfig,
) -> Result<HorizonProblem, CftocError> {
    cfg.validate()?;
    check_model(model, state)?;
    let n = model.a.nrows();
    let m = model.b.ncols();
    let horizon = cfg.horizon;
    check_window(reference, horizon + 1, n, "reference state")?;
    check_window(input_reference, horizon, m, "reference input")?;
    let q = cfg.diagonal("Q", &cfg.q, n)?;
    let p = cfg.diagonal("P", &cfg.p, n)?;
    let r = cfg.diagonal("R", &cfg.r, m)?;
    if let Some(zi) = cfg.z_index {
        if zi >= n {
            return Err(CftocError::Dimension { what: "z index", expected: n, got: zi });
        }
    }

    let layout = HorizonLayout { horizon, state_dim: n, input_dim: m, num_inputs: horizon, num_slacks: 0 };
    let mut qp = QpProblem::new(layout.num_vars());
    add_dynamics(&mut qp, &layout, model, state, reference);
    add_input_box(&mut qp, &layout, cfg.u_min, cfg.u_max);
    if let Some(zi) = cfg.z_index {
        for k in 0..=horizon {
            qp.add_inequality(&[(layout.x(k) + zi, -1.0)], reference[k][zi] - 0.5 * cfg.h);
        }
    }
    for k in 0..=horizon {
        let w = if k == horizon { &p } else { &q };
        for i in 0..n {
            qp.add_square_penalty(layout.x(k) + i, w[i], 0.0);
        }
    }
    for k in 0..horizon {
        for j in 0..m {
            qp.add_square_penalty(layout.u(k) + j, r[j], input_reference[k][j]);
        }
    }

    Ok(HorizonProblem { qp, layout, model: model.clone(), initial_state: state.clone(), u_min: cfg.u_min, u_max: cfg.u_max })
}

/// Solves a built CFTOC. States in the result are an exact rollout of the
/// affine model under the returned inputs.
pub fn solve_horizon(problem: &HorizonProblem, tol: f64, max_iter: usize) -> Result<HorizonSolution, CftocError> {
    let sol = qp::solve(&problem.qp, tol, max_iter)?;
    let layout = &problem.layout;
    let inputs: Vec<InputVector> =
        (0..layout.num_inputs).map(|k| sol.z.rows(layout.u(k), layout.input_dim).into_owned()).collect();
    let slacks: Vec<f64> = (0..layout.num_slacks).map(|k| sol.z[layout.s(k)]).collect();
    let mut states = Vec::with_capacity(layout.horizon + 1);
    states.push(problem.initial_state.clone());
    for k in 0..layout.horizon {
        let next = problem.model.predict(&states[k], &inputs[k]);
        states.push(next);
    }
    Ok(HorizonSolution {
        status: sol.status,
        inputs,
        states,
        slacks,
        objective: sol.objective,
        iterations: sol.iterations,
        kkt_residual: sol.kkt_residual,
        u_min: problem.u_min,
        u_max: problem.u_max,
    })
}

/// The input to apply now, clamped into the input box.
pub fn extract_first_input(sol: &HorizonSolution) -> Result<InputVector, CftocError> {
    if sol.status != QpStatus::Optimal {
        return Err(CftocError::NotOptimal(sol.status));
    }
    let first: &DVector<f64> = sol.inputs.first().ok_or(CftocError::NotOptimal(sol.status))?;
    Ok(first.map(|u| u.clamp(sol.u_min, sol.u_max)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ik::{ik_rest_lengths, IkSettings};
    use crate::linearize::{linearize, linearize_map, FiniteDifference, DEFAULT_DELTA};
    use crate::model::SpineConfig;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    fn scalar_model(a: f64, b: f64, c: f64) -> AffineModel {
        AffineModel {
            a: DMatrix::from_element(1, 1, a),
            b: DMatrix::from_element(1, 1, b),
            c: DVector::from_element(1, c),
            state: DVector::zeros(1),
            input: DVector::zeros(1),
            next_state: DVector::zeros(1),
            clamped_inputs: Vec::new(),
        }
    }

    fn scalar_cfg(horizon: usize) -> ReferenceControllerConfig {
        ReferenceControllerConfig {
            horizon,
            q: vec![1.0],
            p: vec![1.0],
            r: vec![0.5],
            u_min: -10.0,
            u_max: 10.0,
            h: 1.0,
            z_index: None,
        }
    }

    /// ξ⁺ = ξ + u, N = 1: minimize q(ξ0 - r0)² + r(u - ur)² + p(ξ0 + u - r1)².
    #[test]
    fn scalar_one_step_matches_closed_form() {
        let model = scalar_model(1.0, 1.0, 0.0);
        let cfg = scalar_cfg(1);
        let (x0, r1, ur) = (0.3, 1.0, 0.1);
        let refs = vec![DVector::from_element(1, 0.0), DVector::from_element(1, r1)];
        let urefs = vec![DVector::from_element(1, ur)];
        let x = DVector::from_element(1, x0);
        let prob = build_reference_cftoc(&model, &x, &refs, &urefs, &cfg).unwrap();
        let sol = solve_horizon(&prob, 1e-9, 100).unwrap();
        let (p, r) = (1.0, 0.5);
        let u_star = (r * ur + p * (r1 - x0)) / (r + p);
        assert_abs_diff_eq!(sol.inputs[0][0], u_star, epsilon = 1e-8);
        let obj = x0 * x0 + r * (u_star - ur).powi(2) + p * (x0 + u_star - r1).powi(2);
        assert_abs_diff_eq!(sol.objective, obj, epsilon = 1e-8);
        assert_abs_diff_eq!(sol.states[1][0], x0 + u_star, epsilon = 1e-12);
    }

    #[test]
    fn defaults_match_published_constants() {
        let r = ReferenceControllerConfig::default();
        assert_eq!((r.horizon, r.u_min, r.u_max, r.h), (4, 0.0, 0.3, 0.15));
        assert_eq!((r.q.clone(), r.p.clone(), r.r.clone()), (vec![1.0], vec![1.0], vec![2.0]));
        let s = SmoothingControllerConfig::default();
        assert_eq!((s.horizon, s.w8, s.w9, s.w10, s.w11), (10, 1.0, 25.0, 10.0, 5.0));
    }

    #[test]
    fn reference_equilibrium_has_zero_cost() {
        let config = SpineConfig::planar_default();
        let home = config.home_state();
        let u_ref = ik_rest_lengths(&config, &home, &IkSettings::default()).unwrap().rest_lengths;
        let model = linearize(&config, &home, &u_ref, DEFAULT_DELTA).unwrap();
        let cfg = ReferenceControllerConfig::default();
        let refs = vec![home.clone(); cfg.horizon + 1];
        let urefs = vec![u_ref.clone(); cfg.horizon];
        let prob = build_reference_cftoc(&model, &home, &refs, &urefs, &cfg).unwrap();
        let sol = solve_horizon(&prob, 1e-9, 100).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(sol.objective.abs() <= 1e-9, "objective {}", sol.objective);
        for u in &sol.inputs {
            assert!((u - &u_ref).amax() <= 1e-6);
        }
        let first = extract_first_input(&sol).unwrap();
        assert!((first - &u_ref).amax() <= 1e-6);
    }

    #[test]
    fn start_below_collision_bound() {
        let config = SpineConfig::planar_default();
        let mut x = config.home_state();
        let u_ref = ik_rest_lengths(&config, &x, &IkSettings::default()).unwrap().rest_lengths;
        let model = linearize(&config, &x, &u_ref, DEFAULT_DELTA).unwrap();
        let cfg = ReferenceControllerConfig::default();
        let refs = vec![x.clone(); cfg.horizon + 1];
        let urefs = vec![u_ref.clone(); cfg.horizon];
        x[1] = 0.05;
        assert!(matches!(
            build_reference_cftoc(&model, &x, &refs, &urefs, &cfg),
            Err(CftocError::InfeasibleStart { .. })
        ));
        let prob = build_reference_cftoc_unchecked(&model, &x, &refs, &urefs, &cfg).unwrap();
        let sol = solve_horizon(&prob, 1e-8, 100).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
        assert!(extract_first_input(&sol).is_err());
    }

    #[test]
    fn short_window_rejected() {
        let model = scalar_model(1.0, 1.0, 0.0);
        let cfg = scalar_cfg(3);
        let refs = vec![DVector::zeros(1); 3];
        let urefs = vec![DVector::zeros(1); 3];
        assert!(matches!(
            build_reference_cftoc(&model, &DVector::zeros(1), &refs, &urefs, &cfg),
            Err(CftocError::ShortWindow { got: 3, needed: 4 })
        ));
    }

    /// Without a terminal cost, a longer horizon only adds non-negative stage terms.
    #[test]
    fn longer_horizon_never_lowers_cost() {
        let model = scalar_model(1.1, 0.5, 0.02);
        let x = DVector::from_element(1, 0.8);
        let mut last = f64::NEG_INFINITY;
        for horizon in 1..8 {
            let cfg = ReferenceControllerConfig { p: vec![0.0], u_min: -0.3, u_max: 0.3, ..scalar_cfg(horizon) };
            let refs = vec![DVector::zeros(1); horizon + 1];
            let urefs = vec![DVector::zeros(1); horizon];
            let sol = solve_horizon(&build_reference_cftoc(&model, &x, &refs, &urefs, &cfg).unwrap(), 1e-10, 100).unwrap();
            assert_eq!(sol.status, QpStatus::Optimal);
            assert!(sol.objective >= last - 1e-8, "N={horizon}: {} < {last}", sol.objective);
            last = sol.objective;
        }
    }

    #[test]
    fn stage_weight_powers() {
        assert_eq!(stage_weight(0.0, 0), 0.0);
        assert_eq!(stage_weight(1.0, 7), 1.0);
        assert_eq!(stage_weight(3.0, 0), 1.0);
        assert_eq!(stage_weight(3.0, 2), 9.0);
    }

    fn spatial_equilibrium() -> (SpineConfig, StateVector, InputVector, AffineModel) {
        let config = SpineConfig::spatial_default();
        let home = config.home_state();
        let settings = IkSettings { min_density: 25.0, max_rest_length: SmoothingControllerConfig::default().u_max };
        let u = ik_rest_lengths(&config, &home, &settings).unwrap().rest_lengths;
        let model = linearize(&config, &home, &u, DEFAULT_DELTA).unwrap();
        (config, home, u, model)
    }

    #[test]
    fn smoothing_equilibrium_has_zero_cost() {
        let (_, home, u, model) = spatial_equilibrium();
        let cfg = SmoothingControllerConfig::default();
        let refs = vec![home.clone(); cfg.horizon + 1];
        let prob = build_smoothing_cftoc(&model, &home, &u, &refs, &cfg).unwrap();
        let sol = solve_horizon(&prob, 1e-7, 200).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(sol.objective.abs() <= 1e-6, "objective {}", sol.objective);
        for v in &sol.inputs {
            assert!((v - &u).amax() <= 1e-6);
        }
    }

    /// With the inputs fixed, the slack part of the optimum is w8·Σ‖Δu_k‖∞.
    #[test]
    fn epigraph_matches_infinity_norm() {
        let (_, home, u, model) = spatial_equilibrium();
        let cfg = SmoothingControllerConfig { horizon: 3, u_max: 0.3, ..Default::default() };
        let refs = vec![home.clone(); cfg.horizon + 1];
        let mut prob = build_smoothing_cftoc(&model, &home, &u, &refs, &cfg).unwrap();
        let seq: Vec<InputVector> = (0..=cfg.horizon)
            .map(|k| u.map_with_location(|j, _, v| v + 0.004 * ((j * 7 + k * 3) % 5) as f64 - 0.008))
            .collect();
        let layout = prob.layout;
        for (k, v) in seq.iter().enumerate() {
            for j in 0..layout.input_dim {
                prob.qp.add_equality(&[(layout.u(k) + j, 1.0)], v[j]);
            }
        }
        let sol = solve_horizon(&prob, 1e-10, 200).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        let mut expected = 0.0;
        let mut prev = u.clone();
        for (k, v) in seq.iter().enumerate() {
            let dev = (v - &prev).amax();
            assert_abs_diff_eq!(sol.slacks[k], dev, epsilon = 1e-9);
            expected += cfg.w8 * dev;
            prev = v.clone();
        }
        let slack_cost: f64 = sol.slacks.iter().map(|s| cfg.w8 * s).sum();
        assert_abs_diff_eq!(slack_cost, expected, epsilon = 1e-9);
    }

    #[test]
    fn smoothing_constraints_hold_at_optimum() {
        let (config, home, u, model) = spatial_equilibrium();
        let cfg = SmoothingControllerConfig::default();
        let layout = StateLayout::spine(Dimension::Spatial3D, 3);
        // ask for a small lateral shift of the top vertebra
        let mut target = home.clone();
        target[layout.blocks[2].position.start] -= 0.002;
        let refs = vec![target; cfg.horizon + 1];
        let prob = build_smoothing_cftoc(&model, &home, &u, &refs, &cfg).unwrap();
        let tol = 1e-8;
        let sol = solve_horizon(&prob, tol, 200).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        let slack = 1e-7;
        for (k, v) in sol.inputs.iter().enumerate() {
            assert!(v.iter().all(|&x| x >= cfg.u_min - slack && x <= cfg.u_max + slack));
            let (reference, bound) = match k {
                0 => (&u, cfg.w1),
                k if k == cfg.horizon => (&sol.inputs[0], cfg.w3),
                _ => (&sol.inputs[0], cfg.w2),
            };
            assert!((v - reference).amax() <= bound + slack);
        }
        for k in 1..=cfg.horizon {
            let (x, xp) = (&sol.states[k], &sol.states[k - 1]);
            for (block, bound) in layout.blocks.iter().zip([cfg.w4, cfg.w5, cfg.w6]) {
                for i in block.pose() {
                    assert!((x[i] - xp[i]).abs() <= bound + slack);
                }
            }
            for pair in layout.blocks.windows(2) {
                assert!(x[pair[0].z_index] + cfg.w7 <= x[pair[1].z_index] + slack);
            }
        }
        // the rollout obeys the dynamics it was built from
        for k in 0..cfg.horizon {
            let pred = model.predict(&sol.states[k], &sol.inputs[k]);
            assert!((pred - &sol.states[k + 1]).amax() <= 1e-8);
        }
        let _ = config;
    }

    #[test]
    fn smoothing_rejects_planar_model() {
        let config = SpineConfig::planar_default();
        let x = config.home_state();
        let model = linearize_map(
            |x, u| crate::model::step(&config, x, u),
            &x,
            &DVector::from_element(4, 0.1),
            FiniteDifference::default(),
        )
        .unwrap();
        let refs = vec![x.clone(); 11];
        assert!(matches!(
            build_smoothing_cftoc(&model, &x, &DVector::zeros(4), &refs, &SmoothingControllerConfig::default()),
            Err(CftocError::Dimension { .. })
        ));
    }
}
