//! A small linear-programming modeling layer.
//!
//! Programs are built from [`AffineExpr`]s over scalar variables. Every
//! inequality is stored as `expr ≤ 0` and every equality as `expr = 0`; the
//! objective is minimized. Norm epigraphs live in [`epigraph`]; the numeric
//! work is delegated to a [`Backend`] (HiGHS by default) and every optimal
//! answer is re-checked against the constraints before it is returned.

mod backend;
pub mod epigraph;
mod expr;
pub mod mps;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use backend::{Backend, HighsBackend, RawSolution};
pub use epigraph::{
    add_abs_entries, add_abs_epigraph, add_column_sum_epigraph, add_induced1_epigraph, add_l1_epigraph,
    add_max_affine_leq,
};
pub use expr::{AffineExpr, ExprMatrix, Var};

/// Default primal feasibility tolerance for the independent residual check.
pub const FEASIBILITY_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A registered block of variables. Matrix elements are stored row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarHandle {
    id: usize,
    first: usize,
    shape: Shape,
}

impl VarHandle {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shape.is_empty()
    }

    /// The single element of a scalar handle.
    pub fn var(&self) -> Var {
        debug_assert_eq!(self.shape, Shape::Scalar);
        Var(self.first)
    }

    pub fn elem(&self, i: usize) -> Var {
        assert!(i < self.len(), "element {i} out of range for {:?}", self.shape);
        Var(self.first + i)
    }

    pub fn at(&self, r: usize, c: usize) -> Var {
        match self.shape {
            Shape::Matrix(rows, cols) => {
                assert!(r < rows && c < cols, "({r}, {c}) out of range for {rows}x{cols}");
                Var(self.first + r * cols + c)
            }
            _ => panic!("at() on non-matrix handle"),
        }
    }

    pub fn expr(&self) -> AffineExpr {
        self.var().into()
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        (0..self.len()).map(move |i| Var(self.first + i))
    }
}

#[derive(Debug, Clone)]
struct VarInfo {
    lower: f64,
    upper: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Program {
    vars: Vec<VarInfo>,
    handles: Vec<(String, VarHandle)>,
    equalities: Vec<AffineExpr>,
    inequalities: Vec<AffineExpr>,
    objective: AffineExpr,
}

impl Program {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_variable(&mut self, name: &str, shape: Shape, lower: f64, upper: f64) -> VarHandle {
        assert!(lower <= upper, "empty bounds for {name}");
        let handle = VarHandle { id: self.handles.len(), first: self.vars.len(), shape };
        self.vars.extend((0..shape.len()).map(|_| VarInfo { lower, upper }));
        self.handles.push((name.to_string(), handle));
        handle
    }

    pub fn free_scalar(&mut self, name: &str) -> VarHandle {
        self.add_variable(name, Shape::Scalar, f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn nonneg_scalar(&mut self, name: &str) -> VarHandle {
        self.add_variable(name, Shape::Scalar, 0.0, f64::INFINITY)
    }

    /// Adds `expr = 0`.
    pub fn add_eq(&mut self, expr: AffineExpr) {
        self.check(&expr);
        self.equalities.push(expr.canonical());
    }

    /// Adds `expr ≤ 0`.
    pub fn add_le(&mut self, expr: AffineExpr) {
        self.check(&expr);
        self.inequalities.push(expr.canonical());
    }

    /// Adds `lhs ≤ rhs`.
    pub fn add_leq(&mut self, lhs: AffineExpr, rhs: AffineExpr) {
        self.add_le(lhs - rhs);
    }

    pub fn set_objective(&mut self, expr: AffineExpr) {
        self.check(&expr);
        self.objective = expr.canonical();
    }

    fn check(&self, expr: &AffineExpr) {
        if let Some(v) = expr.terms().iter().map(|t| t.0).max() {
            assert!(v < self.vars.len(), "expression references unregistered variable {v}");
        }
    }

    pub fn num_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn equalities(&self) -> &[AffineExpr] {
        &self.equalities
    }

    pub fn inequalities(&self) -> &[AffineExpr] {
        &self.inequalities
    }

    pub fn objective(&self) -> &AffineExpr {
        &self.objective
    }

    pub fn bounds(&self, v: Var) -> (f64, f64) {
        let info = &self.vars[v.0];
        (info.lower, info.upper)
    }

    pub fn handles(&self) -> impl Iterator<Item = (&str, VarHandle)> {
        self.handles.iter().map(|(n, h)| (n.as_str(), *h))
    }

    /// Largest violation of any bound, equality or inequality at `values`.
    pub fn max_violation(&self, values: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for (x, info) in values.iter().zip(&self.vars) {
            worst = worst.max(info.lower - x).max(x - info.upper);
        }
        for e in &self.equalities {
            worst = worst.max(e.eval(values).abs());
        }
        for e in &self.inequalities {
            worst = worst.max(e.eval(values));
        }
        if values.iter().any(|v| !v.is_finite()) {
            worst = f64::INFINITY;
        }
        worst
    }

    pub fn solve(&self) -> Solution {
        solve(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unbounded => "unbounded",
            SolveStatus::NumericalFailure => "numerical-failure",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub status: SolveStatus,
    /// One value per scalar variable (empty unless optimal).
    pub values: Vec<f64>,
    pub objective: f64,
    /// Independently evaluated worst constraint violation.
    pub max_violation: f64,
}

impl Solution {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    pub fn value(&self, v: Var) -> f64 {
        self.values[v.0]
    }

    pub fn scalar(&self, h: VarHandle) -> f64 {
        self.value(h.var())
    }

    pub fn values_of(&self, h: VarHandle) -> Vec<f64> {
        h.vars().map(|v| self.value(v)).collect()
    }

    pub fn eval(&self, e: &AffineExpr) -> f64 {
        e.eval(&self.values)
    }
}

pub fn solve(prog: &Program) -> Solution {
    solve_with(prog, &HighsBackend::default())
}

/// Runs `backend` and audits its answer: an "optimal" assignment that
/// violates any constraint by more than [`FEASIBILITY_TOL`] is reported as
/// a numerical failure.
pub fn solve_with(prog: &Program, backend: &dyn Backend) -> Solution {
    let raw = if prog.num_vars() == 0 {
        // Nothing to optimize; the constraints are constants.
        let feasible = prog.max_violation(&[]) <= FEASIBILITY_TOL;
        RawSolution {
            status: if feasible { SolveStatus::Optimal } else { SolveStatus::Infeasible },
            values: Vec::new(),
        }
    } else {
        backend.solve(prog)
    };
    if raw.status != SolveStatus::Optimal {
        return Solution { status: raw.status, values: Vec::new(), objective: f64::NAN, max_violation: f64::NAN };
    }
    let max_violation = prog.max_violation(&raw.values);
    let objective = prog.objective.eval(&raw.values);
    let status = if max_violation <= FEASIBILITY_TOL && objective.is_finite() {
        SolveStatus::Optimal
    } else {
        SolveStatus::NumericalFailure
    };
    Solution { status, values: raw.values, objective, max_violation }
}
