//! Convex quadratic programs in standard form,
//!
//! ```text
//!     minimize    ½ zᵀ H z + fᵀ z + constant
//!     subject to  G z ≤ h
//!                 A z = b
//! ```
//!
//! solved with a primal-dual interior-point method (Clarabel, Mehrotra
//! predictor-corrector on a sparse quasi-definite KKT system). Small problems
//! are polished afterwards by solving the equality-constrained KKT system on
//! the detected active set.

use std::fmt;
use std::io::{self, BufRead, Write};

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("cost matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("cost matrix is not positive semidefinite (eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("solver setup failed: {0}")]
    Setup(String),
    #[error("malformed problem dump, line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Sparse matrix kept as coordinate triplets; duplicates add up.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        SparseMatrix { nrows, ncols, entries: Vec::new() }
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut s = SparseMatrix::new(m.nrows(), m.ncols());
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                s.push(i, j, m[(i, j)]);
            }
        }
        s
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    /// Adds `v` at `(i, j)`; zeros are dropped.
    pub fn push(&mut self, i: usize, j: usize, v: f64) {
        assert!(i < self.nrows && j < self.ncols, "entry ({i}, {j}) outside {}x{}", self.nrows, self.ncols);
        if v != 0.0 {
            self.entries.push((i, j, v));
        }
    }

    /// Adds `v` at `(i, j)` and `(j, i)`, once on the diagonal.
    pub fn push_sym(&mut self, i: usize, j: usize, v: f64) {
        self.push(i, j, v);
        if i != j {
            self.push(j, i, v);
        }
    }

    /// Appends a row and returns its index.
    pub fn push_row(&mut self, row: &[(usize, f64)]) -> usize {
        let i = self.nrows;
        self.nrows += 1;
        for &(j, v) in row {
            self.push(i, j, v);
        }
        i
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for &(i, j, v) in &self.entries {
            m[(i, j)] += v;
        }
        m
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.nrows);
        for &(i, j, v) in &self.entries {
            y[i] += v * x[j];
        }
        y
    }

    pub fn tr_mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.ncols);
        for &(i, j, v) in &self.entries {
            y[j] += v * x[i];
        }
        y
    }

    /// Row-wise `Σ |a_ij x_j|`, used to scale residuals.
    fn abs_mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.nrows);
        for &(i, j, v) in &self.entries {
            y[i] += (v * x[j]).abs();
        }
        y
    }

    fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |acc, e| acc.max(e.2.abs()))
    }

    fn to_csc(&self, upper_only: bool) -> CscMatrix<f64> {
        let (mut ii, mut jj, mut vv) = (Vec::new(), Vec::new(), Vec::new());
        for &(i, j, v) in &self.entries {
            if !upper_only || i <= j {
                ii.push(i);
                jj.push(j);
                vv.push(v);
            }
        }
        CscMatrix::new_from_triplets(self.nrows, self.ncols, ii, jj, vv)
    }

    /// Duplicates summed, sorted by (row, col).
    fn consolidated(&self) -> Vec<(usize, usize, f64)> {
        let mut e = self.entries.clone();
        e.sort_by_key(|a| (a.0, a.1));
        let mut out: Vec<(usize, usize, f64)> = Vec::with_capacity(e.len());
        for (i, j, v) in e {
            match out.last_mut() {
                Some(last) if last.0 == i && last.1 == j => last.2 += v,
                _ => out.push((i, j, v)),
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    /// Full symmetric cost matrix (both triangles stored).
    pub hessian: SparseMatrix,
    pub linear: DVector<f64>,
    pub constant: f64,
    pub ineq: SparseMatrix,
    pub ineq_rhs: Vec<f64>,
    pub eq: SparseMatrix,
    pub eq_rhs: Vec<f64>,
}

impl QpProblem {
    pub fn new(num_vars: usize) -> Self {
        QpProblem {
            hessian: SparseMatrix::new(num_vars, num_vars),
            linear: DVector::zeros(num_vars),
            constant: 0.0,
            ineq: SparseMatrix::new(0, num_vars),
            ineq_rhs: Vec::new(),
            eq: SparseMatrix::new(0, num_vars),
            eq_rhs: Vec::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.linear.len()
    }

    /// `Σ row_j z_j ≤ rhs`
    pub fn add_inequality(&mut self, row: &[(usize, f64)], rhs: f64) -> usize {
        self.ineq_rhs.push(rhs);
        self.ineq.push_row(row)
    }

    /// `Σ row_j z_j = rhs`
    pub fn add_equality(&mut self, row: &[(usize, f64)], rhs: f64) -> usize {
        self.eq_rhs.push(rhs);
        self.eq.push_row(row)
    }

    /// Adds `weight·(z_i - target)²` to the objective.
    pub fn add_square_penalty(&mut self, i: usize, weight: f64, target: f64) {
        if weight == 0.0 {
            return;
        }
        self.hessian.push(i, i, 2.0 * weight);
        self.linear[i] -= 2.0 * weight * target;
        self.constant += weight * target * target;
    }

    /// Adds `weight·(z_i - z_j)²` to the objective.
    pub fn add_difference_penalty(&mut self, i: usize, j: usize, weight: f64) {
        if weight == 0.0 {
            return;
        }
        self.hessian.push(i, i, 2.0 * weight);
        self.hessian.push(j, j, 2.0 * weight);
        self.hessian.push_sym(i, j, -2.0 * weight);
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&self.hessian.mul_vec(z)) + self.linear.dot(z) + self.constant
    }

    /// Multiplies the whole objective by `alpha`.
    pub fn scale_objective(&mut self, alpha: f64) {
        for e in &mut self.hessian.entries {
            e.2 *= alpha;
        }
        self.linear *= alpha;
        self.constant *= alpha;
    }

    /// Checks dimensions, finiteness, symmetry and positive semidefiniteness.
    ///
    /// Semidefiniteness is tested per connected component of the cost
    /// matrix's sparsity graph, so block-diagonal costs stay cheap.
    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.num_vars();
        if self.hessian.nrows != n || self.hessian.ncols != n {
            return Err(QpError::Dimension(format!(
                "cost matrix is {}x{}, expected {n}x{n}",
                self.hessian.nrows, self.hessian.ncols
            )));
        }
        if self.ineq.ncols != n || self.eq.ncols != n {
            return Err(QpError::Dimension("constraint matrices must have one column per variable".into()));
        }
        if self.ineq.nrows != self.ineq_rhs.len() || self.eq.nrows != self.eq_rhs.len() {
            return Err(QpError::Dimension("constraint rows and right-hand sides differ in length".into()));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        let values = |m: &SparseMatrix| m.entries.iter().map(|e| e.2).collect::<Vec<_>>();
        if !finite(&values(&self.hessian)) || !finite(self.linear.as_slice()) {
            return Err(QpError::NonFinite("objective"));
        }
        if !finite(&values(&self.ineq)) || !finite(&values(&self.eq)) || !finite(&self.ineq_rhs) || !finite(&self.eq_rhs) {
            return Err(QpError::NonFinite("constraints"));
        }

        let h = self.hessian.consolidated();
        let scale = self.hessian.max_abs().max(1.0);
        let mut asym: f64 = 0.0;
        {
            let lookup: std::collections::HashMap<(usize, usize), f64> = h.iter().map(|&(i, j, v)| ((i, j), v)).collect();
            for &(i, j, v) in &h {
                let t = lookup.get(&(j, i)).copied().unwrap_or(0.0);
                asym = asym.max((v - t).abs());
            }
        }
        if asym > 1e-12 * scale {
            return Err(QpError::NotSymmetric(asym));
        }

        // union-find over off-diagonal couplings
        let mut parent: Vec<usize> = (0..n).collect();
        fn root(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for &(i, j, _) in &h {
            if i != j {
                let (ri, rj) = (root(&mut parent, i), root(&mut parent, j));
                if ri != rj {
                    parent[ri] = rj;
                }
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for i in 0..n {
            let r = root(&mut parent, i);
            groups.entry(r).or_default().push(i);
        }
        let mut position = vec![0usize; n];
        let mut group_of = vec![0usize; n];
        let members: Vec<Vec<usize>> = groups.into_values().collect();
        for (g, vars) in members.iter().enumerate() {
            for (k, &v) in vars.iter().enumerate() {
                position[v] = k;
                group_of[v] = g;
            }
        }
        let mut blocks: Vec<DMatrix<f64>> = members.iter().map(|v| DMatrix::zeros(v.len(), v.len())).collect();
        for &(i, j, v) in &h {
            blocks[group_of[i]][(position[i], position[j])] += v;
        }
        for block in blocks {
            let min_eig = if block.nrows() == 1 {
                block[(0, 0)]
            } else {
                SymmetricEigen::new(block).eigenvalues.min()
            };
            if min_eig < -1e-9 * scale {
                return Err(QpError::NotPsd(min_eig));
            }
        }
        Ok(())
    }

    /// Writes the problem in the plain-text dump format read by [`QpProblem::read_dump`].
    ///
    /// ```text
    /// qp <num_vars> <num_ineq> <num_eq>
    /// constant <value>
    /// H <nnz>          followed by nnz lines "i j value"
    /// f                followed by num_vars lines
    /// G <nnz>          followed by nnz lines "i j value"
    /// h                followed by num_ineq lines
    /// A <nnz>          followed by nnz lines "i j value"
    /// b                followed by num_eq lines
    /// ```
    ///
    /// Indices are zero-based; `#` starts a comment line.
    pub fn write_dump<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "qp {} {} {}", self.num_vars(), self.ineq.nrows, self.eq.nrows)?;
        writeln!(out, "constant {}", self.constant)?;
        let write_sparse = |out: &mut W, tag: &str, m: &SparseMatrix| -> io::Result<()> {
            let e = m.consolidated();
            writeln!(out, "{tag} {}", e.len())?;
            for (i, j, v) in e {
                writeln!(out, "{i} {j} {v}")?;
            }
            Ok(())
        };
        write_sparse(&mut out, "H", &self.hessian)?;
        writeln!(out, "f")?;
        for v in self.linear.iter() {
            writeln!(out, "{v}")?;
        }
        write_sparse(&mut out, "G", &self.ineq)?;
        writeln!(out, "h")?;
        for v in &self.ineq_rhs {
            writeln!(out, "{v}")?;
        }
        write_sparse(&mut out, "A", &self.eq)?;
        writeln!(out, "b")?;
        for v in &self.eq_rhs {
            writeln!(out, "{v}")?;
        }
        Ok(())
    }

    pub fn read_dump<R: BufRead>(input: R) -> Result<Self, QpError> {
        let mut r = DumpReader::new(input)?;
        let tok = r.tagged("qp", 3)?;
        let (n, num_ineq, num_eq) = (r.parse(&tok[1])?, r.parse(&tok[2])?, r.parse(&tok[3])?);
        let tok = r.tagged("constant", 1)?;
        let constant = r.parse(&tok[1])?;
        let hessian = r.sparse("H", n, n)?;
        let linear = DVector::from_vec(r.vector("f", n)?);
        let ineq = r.sparse("G", num_ineq, n)?;
        let ineq_rhs = r.vector("h", num_ineq)?;
        let eq = r.sparse("A", num_eq, n)?;
        let eq_rhs = r.vector("b", num_eq)?;
        Ok(QpProblem { hessian, linear, constant, ineq, ineq_rhs, eq, eq_rhs })
    }
}

struct DumpReader {
    lines: std::vec::IntoIter<(usize, String)>,
    line: usize,
}

impl DumpReader {
    fn new<R: BufRead>(input: R) -> Result<Self, QpError> {
        let mut lines = Vec::new();
        for (k, line) in input.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if !t.is_empty() && !t.starts_with('#') {
                lines.push((k + 1, t.to_string()));
            }
        }
        Ok(DumpReader { lines: lines.into_iter(), line: 0 })
    }

    fn err(&self, msg: String) -> QpError {
        QpError::Parse { line: self.line, msg }
    }

    fn tokens(&mut self, what: &str) -> Result<Vec<String>, QpError> {
        let (n, l) = self.lines.next().ok_or_else(|| self.err(format!("unexpected end of input, expected {what}")))?;
        self.line = n;
        Ok(l.split_whitespace().map(str::to_string).collect())
    }

    fn tagged(&mut self, tag: &str, args: usize) -> Result<Vec<String>, QpError> {
        let tok = self.tokens(tag)?;
        if tok.first().map(String::as_str) != Some(tag) || tok.len() != args + 1 {
            return Err(self.err(format!("expected '{tag}' with {args} argument(s)")));
        }
        Ok(tok)
    }

    fn parse<T: std::str::FromStr>(&self, s: &str) -> Result<T, QpError> {
        s.parse().map_err(|_| self.err(format!("cannot parse '{s}'")))
    }

    fn sparse(&mut self, tag: &str, rows: usize, cols: usize) -> Result<SparseMatrix, QpError> {
        let tok = self.tagged(tag, 1)?;
        let nnz: usize = self.parse(&tok[1])?;
        let mut m = SparseMatrix::new(rows, cols);
        for _ in 0..nnz {
            let tok = self.tokens("matrix entry")?;
            if tok.len() != 3 {
                return Err(self.err("expected 'i j value'".into()));
            }
            let (i, j, v): (usize, usize, f64) = (self.parse(&tok[0])?, self.parse(&tok[1])?, self.parse(&tok[2])?);
            if i >= rows || j >= cols {
                return Err(self.err(format!("entry ({i}, {j}) out of range")));
            }
            m.push(i, j, v);
        }
        Ok(m)
    }

    fn vector(&mut self, tag: &str, len: usize) -> Result<Vec<f64>, QpError> {
        self.tagged(tag, 0)?;
        (0..len)
            .map(|_| {
                let tok = self.tokens("vector entry")?;
                if tok.len() != 1 {
                    return Err(self.err("expected one value".into()));
                }
                self.parse(&tok[0])
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    /// Objective unbounded below on the feasible set.
    Unbounded,
    MaxIterations,
    /// The interior-point iteration stalled or the KKT residual stayed above tolerance.
    NumericalFailure,
}

impl fmt::Display for QpStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QpStatus::Optimal => "optimal",
            QpStatus::Infeasible => "infeasible",
            QpStatus::Unbounded => "unbounded",
            QpStatus::MaxIterations => "max_iterations",
            QpStatus::NumericalFailure => "numerical_failure",
        })
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    /// Multipliers of `G z ≤ h`, non-negative at an optimum.
    pub ineq_dual: DVector<f64>,
    /// Multipliers of `A z = b`.
    pub eq_dual: DVector<f64>,
    pub status: QpStatus,
    /// Largest of the scaled stationarity, primal feasibility and
    /// complementarity residuals.
    pub kkt_residual: f64,
    pub objective: f64,
    pub iterations: usize,
}

/// Unscaled KKT residuals of a candidate primal-dual point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    /// `‖H z + f + Gᵀλ + Aᵀν‖∞`
    pub stationarity: f64,
    /// Largest equality violation or positive part of `G z - h`.
    pub primal: f64,
    /// `max_i λ_i·|h - G z|_i`
    pub complementarity: f64,
    /// Most negative inequality multiplier, as a positive number.
    pub dual: f64,
}

impl QpProblem {
    pub fn kkt_residuals(&self, z: &DVector<f64>, ineq_dual: &DVector<f64>, eq_dual: &DVector<f64>) -> KktResiduals {
        let grad = self.hessian.mul_vec(z) + &self.linear + self.ineq.tr_mul_vec(ineq_dual) + self.eq.tr_mul_vec(eq_dual);
        let gz = self.ineq.mul_vec(z);
        let az = self.eq.mul_vec(z);
        let mut primal: f64 = 0.0;
        let mut complementarity: f64 = 0.0;
        for i in 0..gz.len() {
            let gap = self.ineq_rhs[i] - gz[i];
            primal = primal.max(-gap);
            complementarity = complementarity.max((ineq_dual[i] * gap).abs());
        }
        for i in 0..az.len() {
            primal = primal.max((az[i] - self.eq_rhs[i]).abs());
        }
        let dual = ineq_dual.iter().fold(0.0f64, |acc, &l| acc.max(-l));
        KktResiduals { stationarity: grad.amax(), primal, complementarity, dual }
    }

    /// Residuals relative to the magnitude of the terms they balance.
    fn scaled_residual(&self, z: &DVector<f64>, ineq_dual: &DVector<f64>, eq_dual: &DVector<f64>) -> f64 {
        let r = self.kkt_residuals(z, ineq_dual, eq_dual);
        let abs_z = z.abs();
        let stat_scale = 1.0_f64
            .max(self.hessian.abs_mul_vec(&abs_z).amax())
            .max(self.linear.amax())
            .max(self.ineq.tr_mul_vec(&ineq_dual.abs()).amax())
            .max(self.eq.tr_mul_vec(&eq_dual.abs()).amax());
        let prim_scale = 1.0_f64
            .max(self.ineq.abs_mul_vec(&abs_z).amax())
            .max(self.eq.abs_mul_vec(&abs_z).amax())
            .max(self.ineq_rhs.iter().fold(0.0, |a: f64, v| a.max(v.abs())))
            .max(self.eq_rhs.iter().fold(0.0, |a: f64, v| a.max(v.abs())));
        let comp_scale = 1.0_f64.max(self.objective(z).abs());
        (r.stationarity / stat_scale)
            .max(r.primal / prim_scale)
            .max(r.complementarity / comp_scale)
            .max(r.dual / stat_scale)
    }
}

/// Problems whose active-set KKT system has at most this many rows are polished.
const POLISH_LIMIT: usize = 400;
const POLISH_ROUNDS: usize = 8;
const RELEASE_TRIALS: usize = 8;

/// Solves `p` to KKT tolerance `tol` in at most `max_iter` interior-point iterations.
///
/// Invalid problems (bad dimensions, asymmetric or indefinite cost) are
/// rejected with an error; infeasibility and iteration limits are reported
/// through [`QpSolution::status`].
pub fn solve(p: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution, QpError> {
    p.validate()?;
    let n = p.num_vars();
    let (me, mi) = (p.eq.nrows, p.ineq.nrows);

    let hess = p.hessian.to_csc(true);
    let (mut ii, mut jj, mut vv) = (Vec::new(), Vec::new(), Vec::new());
    for &(i, j, v) in &p.eq.entries {
        ii.push(i);
        jj.push(j);
        vv.push(v);
    }
    for &(i, j, v) in &p.ineq.entries {
        ii.push(me + i);
        jj.push(j);
        vv.push(v);
    }
    let cons = CscMatrix::new_from_triplets(me + mi, n, ii, jj, vv);
    let rhs: Vec<f64> = p.eq_rhs.iter().chain(&p.ineq_rhs).copied().collect();
    let mut cones = Vec::new();
    if me > 0 {
        cones.push(SupportedConeT::ZeroConeT(me));
    }
    if mi > 0 {
        cones.push(SupportedConeT::NonnegativeConeT(mi));
    }

    let settings = DefaultSettings {
        verbose: false,
        max_iter: max_iter as u32,
        tol_gap_abs: tol,
        tol_gap_rel: tol,
        tol_feas: tol,
        presolve_enable: false,
        ..DefaultSettings::default()
    };
    let mut solver = DefaultSolver::new(&hess, p.linear.as_slice(), &cons, &rhs, &cones, settings)
        .map_err(|e| QpError::Setup(format!("{e:?}")))?;
    solver.solve();
    let sol = &solver.solution;
    let iterations = sol.iterations as usize;

    let z = DVector::from_column_slice(&sol.x);
    let eq_dual = DVector::from_iterator(me, sol.z[..me].iter().copied());
    let ineq_dual = DVector::from_iterator(mi, sol.z[me..].iter().map(|&l| l.max(0.0)));

    let status = match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => QpStatus::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => QpStatus::Infeasible,
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => QpStatus::Unbounded,
        SolverStatus::MaxIterations | SolverStatus::MaxTime => QpStatus::MaxIterations,
        _ => QpStatus::NumericalFailure,
    };
    if status != QpStatus::Optimal {
        return Ok(QpSolution {
            kkt_residual: f64::INFINITY,
            objective: f64::NAN,
            z,
            ineq_dual,
            eq_dual,
            status,
            iterations,
        });
    }

    let mut best = (z, ineq_dual, eq_dual);
    let mut residual = p.scaled_residual(&best.0, &best.1, &best.2);
    if let Some(polished) = polish(p, &best.0, &best.1) {
        let r = p.scaled_residual(&polished.0, &polished.1, &polished.2);
        if r < residual {
            best = polished;
            residual = r;
        }
    }
    let status = if residual <= tol { QpStatus::Optimal } else { QpStatus::NumericalFailure };
    let (z, ineq_dual, eq_dual) = best;
    Ok(QpSolution { objective: p.objective(&z), kkt_residual: residual, z, ineq_dual, eq_dual, status, iterations })
}

/// Re-solves the KKT system on the active set guessed from an interior point,
/// then refines the guess a few times by releasing constraints with negative
/// multipliers and adding violated ones.
fn polish(p: &QpProblem, z: &DVector<f64>, ineq_dual: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let gz = p.ineq.mul_vec(z);
    let mut active: Vec<bool> = (0..p.ineq.nrows).map(|i| ineq_dual[i] > p.ineq_rhs[i] - gz[i]).collect();
    let mut visited: Vec<Vec<bool>> = Vec::new();
    let mut best: Option<(f64, (DVector<f64>, DVector<f64>, DVector<f64>))> = None;
    let dual_scale = 1.0 + ineq_dual.amax();
    for _ in 0..POLISH_ROUNDS {
        visited.push(active.clone());
        // multipliers far beyond the interior point's betray a nearly dependent active set
        let candidate = solve_active_set(p, &active).filter(|c| c.1.amax() <= 1e6 * dual_scale);
        let Some(candidate) = candidate else {
            active = release_one(p, &active, ineq_dual, &visited)?;
            continue;
        };
        let residual = p.scaled_residual(&candidate.0, &candidate.1, &candidate.2);
        let gz = p.ineq.mul_vec(&candidate.0);
        let scale = 1.0 + gz.amax();
        let mut next = active.clone();
        for i in 0..p.ineq.nrows {
            if active[i] && candidate.1[i] < 0.0 {
                next[i] = false;
            } else if !active[i] && gz[i] - p.ineq_rhs[i] > 1e-12 * scale {
                next[i] = true;
            }
        }
        if best.as_ref().map_or(true, |b| residual < b.0) {
            best = Some((residual, candidate));
        }
        if next == active {
            break;
        }
        active = if visited.contains(&next) {
            // cycling between nearly dependent sets
            match release_one(p, &next, ineq_dual, &visited) {
                Some(a) => a,
                None => break,
            }
        } else {
            next
        };
    }
    best.map(|b| b.1)
}

/// `active` with one constraint released: among the weakest few by interior
/// multiplier and not yet tried, the one whose reduced set solves best.
fn release_one(p: &QpProblem, active: &[bool], ineq_dual: &DVector<f64>, visited: &[Vec<bool>]) -> Option<Vec<bool>> {
    let dual_scale = 1.0 + ineq_dual.amax();
    let mut order: Vec<usize> = (0..p.ineq.nrows).filter(|&i| active[i]).collect();
    order.sort_by(|&a, &b| ineq_dual[a].total_cmp(&ineq_dual[b]));
    let trials: Vec<Vec<bool>> = order
        .iter()
        .take(RELEASE_TRIALS)
        .map(|&i| {
            let mut t = active.to_vec();
            t[i] = false;
            t
        })
        .filter(|t| !visited.contains(t))
        .collect();
    let scored = trials.iter().enumerate().filter_map(|(k, t)| {
        let c = solve_active_set(p, t).filter(|c| c.1.amax() <= 1e6 * dual_scale)?;
        Some((p.scaled_residual(&c.0, &c.1, &c.2), k))
    });
    match scored.min_by(|a, b| a.0.total_cmp(&b.0)) {
        Some((_, k)) => Some(trials[k].clone()),
        None => trials.into_iter().next(),
    }
}

fn solve_active_set(p: &QpProblem, active: &[bool]) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let n = p.num_vars();
    let me = p.eq.nrows;
    let rows: Vec<usize> = (0..p.ineq.nrows).filter(|&i| active[i]).collect();
    let size = n + me + rows.len();
    if size > POLISH_LIMIT {
        return None;
    }
    let mut row_of = vec![usize::MAX; p.ineq.nrows];
    for (k, &i) in rows.iter().enumerate() {
        row_of[i] = n + me + k;
    }
    let mut kkt = DMatrix::zeros(size, size);
    let mut rhs = DVector::zeros(size);
    for &(i, j, v) in &p.hessian.entries {
        kkt[(i, j)] += v;
    }
    for &(i, j, v) in &p.eq.entries {
        kkt[(n + i, j)] += v;
        kkt[(j, n + i)] += v;
    }
    for &(i, j, v) in &p.ineq.entries {
        let r = row_of[i];
        if r != usize::MAX {
            kkt[(r, j)] += v;
            kkt[(j, r)] += v;
        }
    }
    rhs.rows_mut(0, n).copy_from(&(-&p.linear));
    for (i, &b) in p.eq_rhs.iter().enumerate() {
        rhs[n + i] = b;
    }
    for (k, &i) in rows.iter().enumerate() {
        rhs[n + me + k] = p.ineq_rhs[i];
    }
    let x = kkt.lu().solve(&rhs)?;
    if x.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let zp = x.rows(0, n).into_owned();
    let nu = x.rows(n, me).into_owned();
    let mut lam = DVector::zeros(p.ineq.nrows);
    for (k, &i) in rows.iter().enumerate() {
        lam[i] = x[n + me + k];
    }
    Some((zp, lam, nu))
}
