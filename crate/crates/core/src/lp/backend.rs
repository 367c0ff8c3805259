use std::num::NonZeroU32;

use highs::{HighsModelStatus, RowProblem, Sense};

use super::{Program, SolveStatus, FEASIBILITY_TOL};

/// Status and primal values straight from a solver, before auditing.
#[derive(Debug, Clone)]
pub struct RawSolution {
    pub status: SolveStatus,
    pub values: Vec<f64>,
}

pub trait Backend: Sync {
    fn solve(&self, prog: &Program) -> RawSolution;
}

/// HiGHS, single-threaded. The interior-point method with crossover is
/// tried first because it is much faster on the dense synthesis programs;
/// dual simplex is the fallback whenever the first answer is inconclusive
/// or fails the residual check.
#[derive(Debug, Clone)]
pub struct HighsBackend {
    pub feasibility_tol: f64,
    pub time_limit: Option<f64>,
}

impl Default for HighsBackend {
    fn default() -> Self {
        Self { feasibility_tol: 1e-9, time_limit: None }
    }
}

#[derive(Clone, Copy)]
enum Method {
    Ipm,
    Simplex { presolve: bool },
}

impl HighsBackend {
    fn run(&self, prog: &Program, method: Method) -> RawSolution {
        let mut pb = RowProblem::default();
        let cost = dense_costs(prog);
        let cols: Vec<_> = (0..prog.num_vars())
            .map(|i| {
                let (lo, hi) = prog.bounds(super::Var(i));
                pb.add_column(cost[i], lo..=hi)
            })
            .collect();
        for e in prog.equalities() {
            if !e.is_constant() {
                let rhs = -e.constant_part();
                pb.add_row(rhs..=rhs, e.terms().iter().map(|&(v, c)| (cols[v], c)));
            }
        }
        for e in prog.inequalities() {
            if !e.is_constant() {
                let rhs = -e.constant_part();
                pb.add_row(f64::NEG_INFINITY..=rhs, e.terms().iter().map(|&(v, c)| (cols[v], c)));
            }
        }

        let mut model = pb.optimise(Sense::Minimise);
        model.make_quiet();
        model.set_threads(NonZeroU32::MIN);
        model.set_option("primal_feasibility_tolerance", self.feasibility_tol);
        model.set_option("dual_feasibility_tolerance", self.feasibility_tol);
        if let Some(t) = self.time_limit {
            model.set_option("time_limit", t);
        }
        match method {
            Method::Ipm => {
                model.set_option("solver", "ipm");
                model.set_option("run_crossover", "on");
            }
            Method::Simplex { presolve } => {
                model.set_option("solver", "simplex");
                if !presolve {
                    model.set_option("presolve", "off");
                }
            }
        }

        let solved = match model.try_solve() {
            Ok(s) => s,
            Err(_) => return RawSolution { status: SolveStatus::NumericalFailure, values: Vec::new() },
        };
        let status = match solved.status() {
            HighsModelStatus::Optimal => SolveStatus::Optimal,
            HighsModelStatus::Infeasible => SolveStatus::Infeasible,
            HighsModelStatus::Unbounded => SolveStatus::Unbounded,
            // Includes "unbounded or infeasible", which the caller retries.
            _ => SolveStatus::NumericalFailure,
        };
        let values = if status == SolveStatus::Optimal { solved.get_solution().columns().to_vec() } else { Vec::new() };
        RawSolution { status, values }
    }
}

fn dense_costs(prog: &Program) -> Vec<f64> {
    let mut cost = vec![0.0; prog.num_vars()];
    for &(v, c) in prog.objective().terms() {
        cost[v] += c;
    }
    cost
}

fn acceptable(prog: &Program, raw: &RawSolution) -> bool {
    match raw.status {
        SolveStatus::Optimal => prog.max_violation(&raw.values) <= FEASIBILITY_TOL,
        SolveStatus::Infeasible | SolveStatus::Unbounded => true,
        SolveStatus::NumericalFailure => false,
    }
}

impl Backend for HighsBackend {
    fn solve(&self, prog: &Program) -> RawSolution {
        // Constant rows never reach HiGHS; a violated one decides the answer.
        let constant_violation = prog
            .equalities()
            .iter()
            .filter(|e| e.is_constant())
            .map(|e| e.constant_part().abs())
            .chain(prog.inequalities().iter().filter(|e| e.is_constant()).map(|e| e.constant_part()))
            .fold(0.0f64, f64::max);
        if constant_violation > FEASIBILITY_TOL {
            return RawSolution { status: SolveStatus::Infeasible, values: Vec::new() };
        }

        let first = self.run(prog, Method::Ipm);
        if acceptable(prog, &first) {
            return first;
        }
        let second = self.run(prog, Method::Simplex { presolve: true });
        if acceptable(prog, &second) {
            return second;
        }
        // Presolve sometimes stops at "infeasible or unbounded"; without it
        // simplex reports which one.
        let third = self.run(prog, Method::Simplex { presolve: false });
        if acceptable(prog, &third) {
            return third;
        }
        // Hand back whatever optimal point exists so the audit can report
        // its violation.
        [third, second, first]
            .into_iter()
            .find(|r| r.status == SolveStatus::Optimal)
            .unwrap_or(RawSolution { status: SolveStatus::NumericalFailure, values: Vec::new() })
    }
}
