//! Finite-difference affine models of a discrete step map.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};

use crate::model::{self, InputVector, ModelError, SpineConfig, StateVector};

pub const DEFAULT_DELTA: f64 = 1e-6;

/// `x⁺ ≈ A x + B u + c`, exact at the operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub state: StateVector,
    pub input: InputVector,
    /// Step-map value at the operating point.
    pub next_state: StateVector,
    /// Input columns whose lower perturbation was clamped to the input floor.
    pub clamped_inputs: Vec<usize>,
}

impl AffineModel {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn predict(&self, state: &DVector<f64>, input: &DVector<f64>) -> DVector<f64> {
        &self.a * state + &self.b * input + &self.c
    }

    /// Writes `A | B | c` row by row as CSV with a header.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let n = self.state_dim();
        let m = self.input_dim();
        let mut header: Vec<String> = (0..n).map(|j| format!("a{j}")).collect();
        header.extend((0..m).map(|j| format!("b{j}")));
        header.push("c".into());
        writeln!(out, "{}", header.join(","))?;
        for i in 0..n {
            let row: Vec<String> = self
                .a
                .row(i)
                .iter()
                .chain(self.b.row(i).iter())
                .chain(std::iter::once(&self.c[i]))
                .map(|v| v.to_string())
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FiniteDifference {
    pub delta: f64,
    /// Inputs may not be perturbed below this value (rest lengths stay non-negative).
    pub input_floor: Option<f64>,
}

impl Default for FiniteDifference {
    fn default() -> Self {
        FiniteDifference { delta: DEFAULT_DELTA, input_floor: None }
    }
}

/// Central-difference linearization of `map` about `(state, input)`.
///
/// Column `j` of `A` is `(f(x + δe_j, u) - f(x - δe_j, u)) / 2δ`, likewise for
/// `B`. Where `u_j - δ` would fall below the input floor the lower point is
/// moved up to the floor and the quotient uses the shortened span.
pub fn linearize_map<F, E>(map: F, state: &StateVector, input: &InputVector, fd: FiniteDifference) -> Result<AffineModel, E>
where
    F: Fn(&StateVector, &InputVector) -> Result<StateVector, E>,
{
    assert!(fd.delta > 0.0, "finite-difference step must be positive");
    let n = state.len();
    let m = input.len();
    let next_state = map(state, input)?;
    let mut a = DMatrix::zeros(next_state.len(), n);
    let mut b = DMatrix::zeros(next_state.len(), m);

    let mut x = state.clone();
    for j in 0..n {
        x[j] = state[j] + fd.delta;
        let hi = map(&x, input)?;
        x[j] = state[j] - fd.delta;
        let lo = map(&x, input)?;
        x[j] = state[j];
        a.set_column(j, &((hi - lo) / (2.0 * fd.delta)));
    }

    let mut clamped_inputs = Vec::new();
    let mut u = input.clone();
    for j in 0..m {
        let upper = input[j] + fd.delta;
        let mut lower = input[j] - fd.delta;
        if let Some(floor) = fd.input_floor {
            if lower < floor {
                lower = floor.min(input[j]);
                clamped_inputs.push(j);
            }
        }
        u[j] = upper;
        let hi = map(state, &u)?;
        u[j] = lower;
        let lo = map(state, &u)?;
        u[j] = input[j];
        b.set_column(j, &((hi - lo) / (upper - lower)));
    }
    if !clamped_inputs.is_empty() {
        log::debug!(
            "linearization: {} input perturbation(s) clamped at the input floor, one-sided differences used",
            clamped_inputs.len()
        );
    }

    let c = &next_state - &a * state - &b * input;
    Ok(AffineModel { a, b, c, state: state.clone(), input: input.clone(), next_state, clamped_inputs })
}

/// Linearizes the spine's Euler step map, with rest lengths floored at zero.
pub fn linearize(config: &SpineConfig, state: &StateVector, input: &InputVector, delta: f64) -> Result<AffineModel, ModelError> {
    linearize_map(
        |x, u| model::step(config, x, u),
        state,
        input,
        FiniteDifference { delta, input_floor: Some(0.0) },
    )
}
