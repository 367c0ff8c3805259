//! Nominal and distributionally robust synthesis programs.
//!
//! All three formulations share one builder. Decision variables are the
//! causal entries of `Φy`, `Φu`, `φy`, `φu`; each sample contributes a
//! predicted response `η̂_i = Φ̂ (ŷ0 + Θ̂ e_i) + φ̂`, a cost epigraph `s_i` and
//! one `q_{i,k}` per stage constraint `k`.
//!
//! * DR-SLS adds the ambiguity radius `ε̄`, the Wasserstein radius
//!   constraint and the gain caps, and tightens every stage constraint to
//!   `l_g^k ε̄ + (1/N) Σ_i q_{i,k} ≤ 0`.
//! * The SAA baseline is the same program with `ε̄ = 0` and no caps.
//! * The mean-innovation baseline is SAA over the single sample `ē`, which
//!   makes every stage constraint pointwise.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{induced_one_norm, one_norm};
use crate::lp::{
    add_abs_entries, add_column_sum_epigraph, add_l1_epigraph, add_max_affine_leq, AffineExpr, ExprMatrix, Program,
    Shape, Solution, SolveStatus, VarHandle,
};
use crate::lti::StackedOperators;
use crate::sls::{
    extract_policy, mismatch_gain, response_from_param, validate_structure, validate_subspace, AffinePolicy, Layout,
    MismatchRealization, ParamDocument, PolicyDocument, SlsParam, STRUCTURE_TOL,
};

/// Tolerance on the subspace residual and structure of a solved param.
pub const SOLUTION_TOL: f64 = 1e-6;
/// Slack allowed on the induced-norm caps of a solved param.
pub const CAP_TOL: f64 = 1e-7;

/// `h(η) = ‖diag(w) η‖₁` over `η = col(y, u)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    weights: Vec<f64>,
}

impl CostSpec {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::invalid("cost weights", format!("weights must be finite and nonnegative, got {w}")));
        }
        Ok(Self { weights })
    }

    /// Per-channel output weights `q_w` and input weights `r_w`, repeated
    /// over every time step.
    pub fn per_channel(layout: Layout, q_w: &[f64], r_w: &[f64]) -> Result<Self> {
        if q_w.len() != layout.q || r_w.len() != layout.m {
            return Err(Error::dim(format!(
                "cost weights have {} output and {} input entries, expected {} and {}",
                q_w.len(),
                r_w.len(),
                layout.q,
                layout.m
            )));
        }
        let mut w = Vec::with_capacity(layout.eta_len());
        for _ in 0..layout.blocks() {
            w.extend_from_slice(q_w);
        }
        for _ in 0..layout.blocks() {
            w.extend_from_slice(r_w);
        }
        Self::new(w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn eval(&self, eta: &DVector<f64>) -> f64 {
        self.weights.iter().zip(eta.iter()).map(|(w, x)| w * x.abs()).sum()
    }

    fn check(&self, layout: Layout) -> Result<()> {
        if self.weights.len() != layout.eta_len() {
            return Err(Error::dim(format!(
                "cost has {} weights, η has length {}",
                self.weights.len(),
                layout.eta_len()
            )));
        }
        Ok(())
    }
}

/// Lipschitz constant of `h` in the 1-norm: the largest weight.
pub fn lipschitz_of_cost(spec: &CostSpec) -> f64 {
    spec.weights.iter().copied().fold(0.0, f64::max)
}

/// One affine piece `aᵀη + b` with `a` stored sparsely by η index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Piece {
    pub coeffs: Vec<(usize, f64)>,
    pub constant: f64,
}

impl Piece {
    pub fn eval(&self, eta: &DVector<f64>) -> f64 {
        self.coeffs.iter().map(|&(i, a)| a * eta[i]).sum::<f64>() + self.constant
    }

    /// `‖a‖_∞`, the dual of the 1-norm.
    pub fn dual_norm(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |acc, c| acc.max(c.1.abs()))
    }
}

/// A piece applied at every time step: coefficients on `y_k` and `u_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePiece {
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub constant: f64,
}

/// Stage constraints `g_k(η) = max_j (a_jᵀη + b_j) ≤ 0`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConstraintSpec {
    stages: Vec<Vec<Piece>>,
}

impl ConstraintSpec {
    pub fn new(stages: Vec<Vec<Piece>>) -> Result<Self> {
        if stages.iter().any(|s| s.is_empty()) {
            return Err(Error::invalid("constraints", "every stage needs at least one piece"));
        }
        Ok(Self { stages })
    }

    pub fn none() -> Self {
        Self::default()
    }

    /// One stage per time step `k = 0..=T`, each built from `pieces`.
    pub fn per_step(layout: Layout, pieces: &[StagePiece]) -> Result<Self> {
        if pieces.is_empty() {
            return Ok(Self::none());
        }
        for p in pieces {
            if p.y.len() != layout.q || p.u.len() != layout.m {
                return Err(Error::dim(format!(
                    "stage piece has {} output and {} input coefficients, expected {} and {}",
                    p.y.len(),
                    p.u.len(),
                    layout.q,
                    layout.m
                )));
            }
        }
        let stages = (0..layout.blocks())
            .map(|k| {
                pieces
                    .iter()
                    .map(|p| {
                        let mut coeffs = Vec::new();
                        for (j, &a) in p.y.iter().enumerate() {
                            if a != 0.0 {
                                coeffs.push((k * layout.q + j, a));
                            }
                        }
                        for (j, &a) in p.u.iter().enumerate() {
                            if a != 0.0 {
                                coeffs.push((layout.ny() + k * layout.m + j, a));
                            }
                        }
                        Piece { coeffs, constant: p.constant }
                    })
                    .collect()
            })
            .collect();
        Self::new(stages)
    }

    pub fn stages(&self) -> &[Vec<Piece>] {
        &self.stages
    }

    pub fn stage_value(&self, k: usize, eta: &DVector<f64>) -> f64 {
        self.stages[k].iter().map(|p| p.eval(eta)).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn stage_lipschitz(&self, k: usize) -> f64 {
        self.stages[k].iter().map(Piece::dual_norm).fold(0.0, f64::max)
    }

    /// Per-stage violation flags (`g_k(η) > tol`).
    pub fn violations(&self, eta: &DVector<f64>, tol: f64) -> Vec<bool> {
        (0..self.stages.len()).map(|k| self.stage_value(k, eta) > tol).collect()
    }

    fn check(&self, layout: Layout) -> Result<()> {
        let len = layout.eta_len();
        for stage in &self.stages {
            for p in stage {
                if let Some(&(i, _)) = p.coeffs.iter().find(|c| c.0 >= len) {
                    return Err(Error::dim(format!("constraint coefficient index {i} outside η (length {len})")));
                }
            }
        }
        Ok(())
    }
}

/// Lipschitz constant of the constraint in the 1-norm: the largest `‖a‖_∞`
/// over all pieces of all stages.
pub fn lipschitz_of_constraint(spec: &ConstraintSpec) -> f64 {
    (0..spec.stages.len()).map(|k| spec.stage_lipschitz(k)).fold(0.0, f64::max)
}

/// Innovation samples `e_i`, equally weighted.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    samples: Vec<DVector<f64>>,
}

impl SampleSet {
    pub fn new(samples: Vec<DVector<f64>>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::invalid("samples", "at least one sample is required"));
        };
        let len = first.len();
        if samples.iter().any(|s| s.len() != len) {
            return Err(Error::dim("innovation samples have unequal lengths"));
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.samples[0].len()
    }

    pub fn samples(&self) -> &[DVector<f64>] {
        &self.samples
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.sample_len());
        for s in &self.samples {
            m += s;
        }
        m / self.samples.len() as f64
    }
}

/// Bounds `‖Δ‖ ≤ γ₁`, `‖Θ̃‖ ≤ γ₂`, `‖ỹ0‖ ≤ γ₃` on the model error and `κ` on
/// the Wasserstein error of the empirical innovation distribution.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UncertaintyBudget {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub kappa: f64,
}

impl UncertaintyBudget {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in
            [("gamma1", self.gamma1), ("gamma2", self.gamma2), ("gamma3", self.gamma3), ("kappa", self.kappa)]
        {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("budget.{name}"), format!("must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Caps `γ₁‖Φ̂u‖ ≤ ρ` and `‖Φ̂y‖ ≤ σ` under which the radius bound holds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainCaps {
    pub rho: f64,
    pub sigma: f64,
}

impl GainCaps {
    pub fn new(rho: f64, sigma: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::invalid("rho", format!("must lie in [0, 1), got {rho}")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid("sigma", format!("must be positive and finite, got {sigma}")));
        }
        Ok(Self { rho, sigma })
    }
}

/// The nominal lifted model the synthesis works with.
#[derive(Debug, Clone)]
pub struct PredictionData {
    pub layout: Layout,
    pub g: DMatrix<f64>,
    pub theta: DMatrix<f64>,
    pub y0: DVector<f64>,
}

impl PredictionData {
    pub fn new(ops: &StackedOperators, y0: DVector<f64>) -> Result<Self> {
        Self::from_parts(Layout::new(ops.horizon, ops.m, ops.q), ops.g.clone(), ops.theta.clone(), y0)
    }

    pub fn from_parts(layout: Layout, g: DMatrix<f64>, theta: DMatrix<f64>, y0: DVector<f64>) -> Result<Self> {
        layout.yu().check(&g, "G")?;
        layout.yy().check(&theta, "Θ")?;
        if y0.len() != layout.ny() {
            return Err(Error::dim(format!("y0 has length {}, expected {}", y0.len(), layout.ny())));
        }
        Ok(Self { layout, g, theta, y0 })
    }

    /// `ŷ0 + Θ̂ e`.
    pub fn driving(&self, e: &DVector<f64>) -> DVector<f64> {
        &self.y0 + &self.theta * e
    }

    fn check_samples(&self, samples: &SampleSet) -> Result<()> {
        if samples.sample_len() != self.layout.ny() {
            return Err(Error::dim(format!(
                "innovation samples have length {}, expected {}",
                samples.sample_len(),
                self.layout.ny()
            )));
        }
        Ok(())
    }
}

/// Which program produced a result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    DrSls,
    /// Certainty equivalence with the mean innovation, pointwise constraints.
    NominalMean,
    /// Sample average over all innovation samples, averaged constraints.
    NominalSaa,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::DrSls => "DR-SLS",
            Method::NominalMean => "N-SLS",
            Method::NominalSaa => "SAA-SLS",
        }
    }
}

/// Nominal formulation used as the baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NominalMode {
    #[default]
    Mean,
    Saa,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub rho: f64,
    pub sigma: f64,
    pub status: SolveStatus,
    pub objective: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub method: Method,
    pub status: SolveStatus,
    pub param: SlsParam,
    pub policy: AffinePolicy,
    /// Ambiguity radius `ε̄` (zero for the nominal baselines).
    pub epsilon_bar: f64,
    pub objective: f64,
    /// Gain caps used (`None` for the nominal baselines).
    pub caps: Option<GainCaps>,
    /// Predicted responses `η̂_i`, one per sample the program used.
    pub predicted: Vec<DVector<f64>>,
    pub s: Vec<f64>,
    /// `q[i][k]` for sample `i` and stage `k`.
    pub q: Vec<Vec<f64>>,
    pub subspace_residual: f64,
    pub max_violation: f64,
    /// Full grid table when the result came from [`grid_search`].
    pub grid: Vec<GridPoint>,
}

impl SynthesisResult {
    /// Predicted response for innovation `e` under the nominal model.
    pub fn predict(&self, data: &PredictionData, e: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(response_from_param(&self.param, &data.y0, &data.theta, e)?.eta)
    }

    pub fn to_document(&self) -> ResultDocument {
        ResultDocument {
            method: self.method,
            status: self.status,
            objective: self.objective,
            epsilon_bar: self.epsilon_bar,
            rho: self.caps.map(|c| c.rho),
            sigma: self.caps.map(|c| c.sigma),
            subspace_residual: self.subspace_residual,
            max_violation: self.max_violation,
            param: self.param.to_document(),
            policy: self.policy.to_document(),
            s: self.s.clone(),
            grid: self.grid.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultDocument {
    pub method: Method,
    pub status: SolveStatus,
    pub objective: f64,
    pub epsilon_bar: f64,
    pub rho: Option<f64>,
    pub sigma: Option<f64>,
    pub subspace_residual: f64,
    pub max_violation: f64,
    pub param: ParamDocument,
    pub policy: PolicyDocument,
    pub s: Vec<f64>,
    pub grid: Vec<GridPoint>,
}

/// Causal entries of the parameterization as program expressions.
#[derive(Debug, Clone)]
pub struct ParamExprs {
    pub layout: Layout,
    pub map_y: ExprMatrix,
    pub map_u: ExprMatrix,
    pub offset_y: Vec<AffineExpr>,
    pub offset_u: Vec<AffineExpr>,
}

impl ParamExprs {
    /// Allocates variables for the block-lower entries of `Φy`, the block
    /// strictly-lower entries of `Φu` and all of `φ`; every other entry is
    /// the constant zero.
    fn allocate(prog: &mut Program, layout: Layout) -> Self {
        let yy = layout.yy();
        let uy = layout.uy();
        let count_y =
            (0..layout.ny()).map(|r| (0..layout.ny()).filter(|&c| yy.col_block(c) <= yy.row_block(r)).count()).sum();
        let count_u =
            (0..layout.nu()).map(|r| (0..layout.ny()).filter(|&c| uy.col_block(c) < uy.row_block(r)).count()).sum();
        let free = (f64::NEG_INFINITY, f64::INFINITY);
        let hy = prog.add_variable("Phi_y", Shape::Vector(count_y), free.0, free.1);
        let hu = prog.add_variable("Phi_u", Shape::Vector(count_u), free.0, free.1);
        let oy = prog.add_variable("phi_y", Shape::Vector(layout.ny()), free.0, free.1);
        let ou = prog.add_variable("phi_u", Shape::Vector(layout.nu()), free.0, free.1);

        let mut next = 0;
        let map_y = ExprMatrix::from_fn(layout.ny(), layout.ny(), |r, c| {
            if yy.col_block(c) <= yy.row_block(r) {
                next += 1;
                hy.elem(next - 1).into()
            } else {
                AffineExpr::zero()
            }
        });
        let mut next = 0;
        let map_u = ExprMatrix::from_fn(layout.nu(), layout.ny(), |r, c| {
            if uy.col_block(c) < uy.row_block(r) {
                next += 1;
                hu.elem(next - 1).into()
            } else {
                AffineExpr::zero()
            }
        });
        Self {
            layout,
            map_y,
            map_u,
            offset_y: oy.vars().map(AffineExpr::from).collect(),
            offset_u: ou.vars().map(AffineExpr::from).collect(),
        }
    }

    /// `[I −G][Φy φy; Φu φu] = [I 0]`, written only for the blocks that are
    /// not structurally zero.
    fn add_subspace(&self, prog: &mut Program, g: &DMatrix<f64>) {
        let l = self.layout;
        let yy = l.yy();
        let g_times = |col: &[AffineExpr], r: usize| {
            let mut e = AffineExpr::zero();
            for (k, x) in col.iter().enumerate() {
                let a = g[(r, k)];
                if a != 0.0 && !x.terms().is_empty() {
                    e.add_scaled(x, a);
                }
            }
            e
        };
        for c in 0..l.ny() {
            let col: Vec<AffineExpr> = self.map_u.column(c).cloned().collect();
            for r in 0..l.ny() {
                if yy.col_block(c) > yy.row_block(r) {
                    continue;
                }
                let mut e = self.map_y.get(r, c).clone() - g_times(&col, r);
                if r == c {
                    e += -1.0;
                }
                prog.add_eq(e);
            }
        }
        for r in 0..l.ny() {
            prog.add_eq(self.offset_y[r].clone() - g_times(&self.offset_u, r));
        }
    }

    /// `η̂ = Φ z + φ` as expressions.
    fn response(&self, z: &DVector<f64>) -> Vec<AffineExpr> {
        let row = |m: &ExprMatrix, off: &AffineExpr, r: usize| {
            let mut e = off.clone();
            for (c, &zc) in z.iter().enumerate() {
                let x = m.get(r, c);
                if zc != 0.0 && !x.terms().is_empty() {
                    e.add_scaled(x, zc);
                }
            }
            e
        };
        let mut out = Vec::with_capacity(self.layout.eta_len());
        out.extend((0..self.layout.ny()).map(|r| row(&self.map_y, &self.offset_y[r], r)));
        out.extend((0..self.layout.nu()).map(|r| row(&self.map_u, &self.offset_u[r], r)));
        out
    }

    pub fn value(&self, sol: &Solution) -> Result<SlsParam> {
        SlsParam::from_solver_values(
            self.layout,
            self.map_y.eval(&sol.values),
            self.map_u.eval(&sol.values),
            DVector::from_iterator(self.layout.ny(), self.offset_y.iter().map(|e| sol.eval(e))),
            DVector::from_iterator(self.layout.nu(), self.offset_u.iter().map(|e| sol.eval(e))),
            STRUCTURE_TOL,
        )
    }
}

/// Handles into a built synthesis program.
#[derive(Debug, Clone)]
pub struct SynthesisHandles {
    pub method: Method,
    pub param: ParamExprs,
    /// `ε̄`; `None` for the nominal programs.
    pub epsilon_bar: Option<VarHandle>,
    pub t_map: Option<VarHandle>,
    pub t_offset_u: Option<VarHandle>,
    pub s: Vec<VarHandle>,
    pub q: Vec<Vec<VarHandle>>,
    pub caps: Option<GainCaps>,
}

/// Constant coefficients of the radius constraint
/// `ε̄ ≥ c_map·‖Φ̂‖ + c_offset·‖φ̂u‖₁`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadiusCoefficients {
    pub c_map: f64,
    pub c_offset: f64,
}

pub fn radius_coefficients(
    data: &PredictionData,
    samples: &SampleSet,
    budget: &UncertaintyBudget,
    caps: &GainCaps,
) -> Result<RadiusCoefficients> {
    data.check_samples(samples)?;
    budget.validate()?;
    let caps = GainCaps::new(caps.rho, caps.sigma)?;
    let n = samples.len() as f64;
    let rho = caps.rho;
    let sum: f64 =
        samples.samples().iter().map(|e| rho * one_norm(&data.driving(e)) + budget.gamma2 * one_norm(e)).sum();
    let c_map = (sum + n * budget.gamma3) / (n * (1.0 - rho))
        + budget.kappa / (1.0 - rho) * (induced_one_norm(&data.theta) + budget.gamma2);
    let c_offset =
        if budget.gamma1 > 0.0 { (rho / budget.gamma1 + caps.sigma) * (budget.gamma1 / (1.0 - rho)) } else { 0.0 };
    Ok(RadiusCoefficients { c_map, c_offset })
}

/// Adds `t_Φ ≥ ‖[Φ̂y; Φ̂u]‖`, `t_φu ≥ ‖φ̂u‖₁`, the radius constraint and the
/// gain caps. Returns `(ε̄, t_Φ, t_φu)`.
pub fn build_radius_constraint(
    prog: &mut Program,
    data: &PredictionData,
    samples: &SampleSet,
    budget: &UncertaintyBudget,
    caps: &GainCaps,
    param: &ParamExprs,
) -> Result<(VarHandle, VarHandle, VarHandle)> {
    let coef = radius_coefficients(data, samples, budget, caps)?;
    let abs_y = add_abs_entries(prog, "abs_Phi_y", &param.map_y);
    let abs_u = add_abs_entries(prog, "abs_Phi_u", &param.map_u);
    let t_map = add_column_sum_epigraph(prog, "t_Phi", &abs_y.vstack(&abs_u));
    let t_offset = add_l1_epigraph(prog, "t_phi_u", &param.offset_u);

    let cap_y = add_column_sum_epigraph(prog, "norm_Phi_y", &abs_y);
    prog.add_leq(cap_y.expr(), AffineExpr::constant(caps.sigma));
    if budget.gamma1 > 0.0 {
        let cap_u = add_column_sum_epigraph(prog, "norm_Phi_u", &abs_u);
        prog.add_leq(cap_u.expr() * budget.gamma1, AffineExpr::constant(caps.rho));
    }

    let eps = prog.nonneg_scalar("epsilon_bar");
    prog.add_leq(t_map.expr() * coef.c_map + t_offset.expr() * coef.c_offset, eps.expr());
    Ok((eps, t_map, t_offset))
}

/// Core builder. `robust` carries the DR data; without it the program is
/// the SAA program over `samples`.
fn build_program(
    data: &PredictionData,
    samples: &SampleSet,
    cost: &CostSpec,
    constraints: &ConstraintSpec,
    robust: Option<(&UncertaintyBudget, &GainCaps)>,
    method: Method,
) -> Result<(Program, SynthesisHandles)> {
    let l = data.layout;
    data.check_samples(samples)?;
    cost.check(l)?;
    constraints.check(l)?;

    let mut prog = Program::new();
    let param = ParamExprs::allocate(&mut prog, l);
    param.add_subspace(&mut prog, &data.g);

    let (eps, t_map, t_offset) = match robust {
        Some((budget, caps)) => {
            let (e, tm, to) = build_radius_constraint(&mut prog, data, samples, budget, caps, &param)?;
            (Some(e), Some(tm), Some(to))
        }
        None => (None, None, None),
    };

    let n = samples.len();
    let stages = constraints.stages();
    let mut s = Vec::with_capacity(n);
    let mut q: Vec<Vec<VarHandle>> = Vec::with_capacity(n);
    for (i, e) in samples.samples().iter().enumerate() {
        let eta = param.response(&data.driving(e));
        let weighted: Vec<AffineExpr> =
            eta.iter().zip(cost.weights()).filter(|(_, &w)| w > 0.0).map(|(x, &w)| x.clone() * w).collect();
        s.push(add_l1_epigraph(&mut prog, &format!("s{i}"), &weighted));

        let mut qi = Vec::with_capacity(stages.len());
        for (k, pieces) in stages.iter().enumerate() {
            let qik = prog.free_scalar(&format!("q{i}_{k}"));
            let exprs: Vec<AffineExpr> = pieces
                .iter()
                .map(|p| {
                    let coeffs = p.coeffs.iter().map(|&(_, a)| a);
                    let picked: Vec<AffineExpr> = p.coeffs.iter().map(|&(j, _)| eta[j].clone()).collect();
                    AffineExpr::dot(coeffs, &picked) + p.constant
                })
                .collect();
            add_max_affine_leq(&mut prog, &exprs, &qik.expr());
            qi.push(qik);
        }
        q.push(qi);
    }

    let inv_n = 1.0 / n as f64;
    for k in 0..stages.len() {
        let mut lhs = AffineExpr::zero();
        for qi in &q {
            lhs.push(qi[k].var(), inv_n);
        }
        if let Some(eps) = eps {
            lhs.push(eps.var(), constraints.stage_lipschitz(k));
        }
        prog.add_le(lhs);
    }

    let mut objective = AffineExpr::zero();
    for si in &s {
        objective.push(si.var(), inv_n);
    }
    if let Some(eps) = eps {
        objective.push(eps.var(), lipschitz_of_cost(cost));
    }
    prog.set_objective(objective);

    let handles = SynthesisHandles {
        method,
        param,
        epsilon_bar: eps,
        t_map,
        t_offset_u: t_offset,
        s,
        q,
        caps: robust.map(|(_, c)| *c),
    };
    Ok((prog, handles))
}

pub fn build_drsls(
    data: &PredictionData,
    samples: &SampleSet,
    budget: &UncertaintyBudget,
    caps: &GainCaps,
    cost: &CostSpec,
    constraints: &ConstraintSpec,
) -> Result<(Program, SynthesisHandles)> {
    build_program(data, samples, cost, constraints, Some((budget, caps)), Method::DrSls)
}

/// Nominal program: `Mean` uses the sample mean `ē` with pointwise
/// constraints, `Saa` averages cost and constraints over every sample.
pub fn build_nominal(
    data: &PredictionData,
    samples: &SampleSet,
    mode: NominalMode,
    cost: &CostSpec,
    constraints: &ConstraintSpec,
) -> Result<(Program, SynthesisHandles)> {
    match mode {
        NominalMode::Mean => {
            let mean = SampleSet::new(vec![samples.mean()])?;
            build_program(data, &mean, cost, constraints, None, Method::NominalMean)
        }
        NominalMode::Saa => build_program(data, samples, cost, constraints, None, Method::NominalSaa),
    }
}

/// Solves a built program and turns the answer into a checked result.
pub fn finish(
    prog: &Program,
    handles: &SynthesisHandles,
    data: &PredictionData,
    samples: &SampleSet,
    budget: Option<&UncertaintyBudget>,
) -> Result<SynthesisResult> {
    let sol = prog.solve();
    if !sol.is_optimal() {
        return Err(Error::Solver { status: sol.status, context: format!("{} synthesis", handles.method.label()) });
    }
    let param = handles.param.value(&sol)?;
    if !validate_structure(&param, SOLUTION_TOL)? {
        return Err(Error::Structure("solved parameterization breaks the block structure".into()));
    }
    let subspace_residual = validate_subspace(&data.g, &param)?;
    if subspace_residual > SOLUTION_TOL {
        return Err(Error::Structure(format!("subspace residual {subspace_residual:.3e} above {SOLUTION_TOL:.0e}")));
    }
    if let (Some(caps), Some(budget)) = (handles.caps, budget) {
        check_caps(&param, budget, &caps, CAP_TOL)?;
    }
    let policy = extract_policy(&param)?;

    let used: Vec<DVector<f64>> = match handles.method {
        Method::NominalMean => vec![samples.mean()],
        _ => samples.samples().to_vec(),
    };
    let predicted = used
        .iter()
        .map(|e| Ok(response_from_param(&param, &data.y0, &data.theta, e)?.eta))
        .collect::<Result<Vec<_>>>()?;

    Ok(SynthesisResult {
        method: handles.method,
        status: sol.status,
        param,
        policy,
        epsilon_bar: handles.epsilon_bar.map_or(0.0, |h| sol.scalar(h)),
        objective: sol.objective,
        caps: handles.caps,
        predicted,
        s: handles.s.iter().map(|h| sol.scalar(*h)).collect(),
        q: handles.q.iter().map(|qi| qi.iter().map(|h| sol.scalar(*h)).collect()).collect(),
        subspace_residual,
        max_violation: sol.max_violation,
        grid: Vec::new(),
    })
}

/// `‖Φy‖ ≤ σ + tol` and `γ₁‖Φu‖ ≤ ρ + tol`.
pub fn check_caps(param: &SlsParam, budget: &UncertaintyBudget, caps: &GainCaps, tol: f64) -> Result<()> {
    let ny = induced_one_norm(&param.map_y);
    let nu = induced_one_norm(&param.map_u);
    if ny > caps.sigma + tol {
        return Err(Error::Premise(format!("‖Φy‖ = {ny:.9} exceeds σ = {}", caps.sigma)));
    }
    if budget.gamma1 * nu > caps.rho + tol {
        return Err(Error::Premise(format!("γ₁‖Φu‖ = {:.9} exceeds ρ = {}", budget.gamma1 * nu, caps.rho)));
    }
    Ok(())
}

pub fn solve_drsls(
    data: &PredictionData,
    samples: &SampleSet,
    budget: &UncertaintyBudget,
    caps: &GainCaps,
    cost: &CostSpec,
    constraints: &ConstraintSpec,
) -> Result<SynthesisResult> {
    let (prog, handles) = build_drsls(data, samples, budget, caps, cost, constraints)?;
    finish(&prog, &handles, data, samples, Some(budget))
}

pub fn solve_nominal(
    data: &PredictionData,
    samples: &SampleSet,
    mode: NominalMode,
    cost: &CostSpec,
    constraints: &ConstraintSpec,
) -> Result<SynthesisResult> {
    let (prog, handles) = build_nominal(data, samples, mode, cost, constraints)?;
    finish(&prog, &handles, data, samples, None)
}

/// One DR-SLS solve per `(ρ, σ)` pair, run in parallel. Returns the feasible
/// result with the lowest objective (ties go to smaller `ρ`, then smaller
/// `σ`) with the whole table attached.
pub fn grid_search(
    rho_grid: &[f64],
    sigma_grid: &[f64],
    data: &PredictionData,
    samples: &SampleSet,
    budget: &UncertaintyBudget,
    cost: &CostSpec,
    constraints: &ConstraintSpec,
) -> Result<SynthesisResult> {
    if rho_grid.is_empty() || sigma_grid.is_empty() {
        return Err(Error::invalid("grid", "ρ and σ grids must be nonempty"));
    }
    let mut points = Vec::with_capacity(rho_grid.len() * sigma_grid.len());
    for &rho in rho_grid {
        for &sigma in sigma_grid {
            points.push(GainCaps::new(rho, sigma)?);
        }
    }
    let outcomes: Vec<Result<SynthesisResult>> =
        points.par_iter().map(|caps| solve_drsls(data, samples, budget, caps, cost, constraints)).collect();

    let mut table = Vec::with_capacity(points.len());
    let mut best: Option<SynthesisResult> = None;
    let mut first_failure: Option<SolveStatus> = None;
    for (caps, outcome) in points.iter().zip(outcomes) {
        match outcome {
            Ok(res) => {
                table.push(GridPoint {
                    rho: caps.rho,
                    sigma: caps.sigma,
                    status: res.status,
                    objective: Some(res.objective),
                });
                let better = match &best {
                    None => true,
                    Some(b) => res.objective < b.objective - 1e-9 * b.objective.abs().max(1.0),
                };
                if better {
                    best = Some(res);
                }
            }
            Err(err) => {
                let status = match err {
                    Error::Solver { status, .. } => status,
                    _ => SolveStatus::NumericalFailure,
                };
                first_failure.get_or_insert(status);
                table.push(GridPoint { rho: caps.rho, sigma: caps.sigma, status, objective: None });
            }
        }
    }
    match best {
        Some(mut res) => {
            res.grid = table;
            Ok(res)
        }
        None => Err(Error::GridInfeasible {
            points: points.len(),
            best_status: first_failure.unwrap_or(SolveStatus::NumericalFailure),
        }),
    }
}

/// Right-hand side of the radius constraint for a concrete parameterization.
/// Errors when the cap premises do not hold.
pub fn eval_radius_bound(
    param: &SlsParam,
    data: &PredictionData,
    samples: &SampleSet,
    budget: &UncertaintyBudget,
    caps: &GainCaps,
) -> Result<f64> {
    check_caps(param, budget, caps, CAP_TOL)?;
    let coef = radius_coefficients(data, samples, budget, caps)?;
    Ok(coef.c_map * induced_one_norm(&param.stacked_map()) + coef.c_offset * one_norm(&param.offset_u))
}

/// The four terms of the distribution-shift bound, either their realized
/// values under one mismatch or their closed-form upper bounds. Terms 1
/// and 2 are per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftTerms {
    pub term1: Vec<f64>,
    pub term2: Vec<f64>,
    pub term3: f64,
    pub term4: f64,
}

impl ShiftTerms {
    /// `(1/N) Σ_i (term1_i + term2_i) + term3 + term4`.
    pub fn total(&self) -> f64 {
        let n = self.term1.len() as f64;
        (self.term1.iter().sum::<f64>() + self.term2.iter().sum::<f64>()) / n + self.term3 + self.term4
    }
}

/// Closed-form bounds on each shift term.
pub fn shift_term_bounds(
    param: &SlsParam,
    data: &PredictionData,
    samples: &SampleSet,
    budget: &UncertaintyBudget,
    caps: &GainCaps,
) -> Result<ShiftTerms> {
    check_caps(param, budget, caps, CAP_TOL)?;
    data.check_samples(samples)?;
    let rho = caps.rho;
    let norm_map = induced_one_norm(&param.stacked_map());
    let k = 1.0 / (1.0 - rho);
    let term1 = samples.samples().iter().map(|e| rho * k * norm_map * one_norm(&data.driving(e))).collect();
    let term2 =
        samples.samples().iter().map(|e| k * norm_map * (budget.gamma2 * one_norm(e) + budget.gamma3)).collect();
    let term3 = if budget.gamma1 > 0.0 {
        (rho / budget.gamma1 + caps.sigma) * budget.gamma1 * k * one_norm(&param.offset_u)
    } else {
        0.0
    };
    let term4 = budget.kappa * k * norm_map * (induced_one_norm(&data.theta) + budget.gamma2);
    Ok(ShiftTerms { term1, term2, term3, term4 })
}

/// Realized shift terms under the mismatch `mm`:
/// `‖Φ̂(R_Φ − I)(ŷ0 + Θ̂e_i)‖`, `‖Φ̂R_Φ(ỹ0 + Θ̃e_i)‖`, `‖(R_φ − I)φ̂‖` and
/// `κ‖Φ̂R_Φ(Θ̂ + Θ̃)‖`.
pub fn shift_terms(
    param: &SlsParam,
    mm: &MismatchRealization,
    data: &PredictionData,
    samples: &SampleSet,
    kappa: f64,
) -> Result<ShiftTerms> {
    data.check_samples(samples)?;
    let r_phi = mismatch_gain(&param.map_u, &mm.delta)?;
    let map = param.stacked_map();
    let map_r = &map * &r_phi;
    let n = r_phi.nrows();
    let map_r_minus = &map * (&r_phi - DMatrix::identity(n, n));
    let term1 = samples.samples().iter().map(|e| one_norm(&(&map_r_minus * data.driving(e)))).collect();
    let term2 = samples.samples().iter().map(|e| one_norm(&(&map_r * (&mm.y0_err + &mm.theta_err * e)))).collect();
    let shift = &r_phi * (&mm.delta * &param.offset_u);
    let term3 = one_norm(&(&map * shift));
    let term4 = kappa * induced_one_norm(&(&map_r * (&data.theta + &mm.theta_err)));
    Ok(ShiftTerms { term1, term2, term3, term4 })
}

/// Paired-coupling shift `(1/N) Σ_i ‖η̂_i − η_i‖₁` between nominal
/// predictions and true responses under `mm`.
pub fn paired_shift(
    param: &SlsParam,
    mm: &MismatchRealization,
    data: &PredictionData,
    samples: &SampleSet,
) -> Result<f64> {
    let mut total = 0.0;
    for e in samples.samples() {
        let nominal = response_from_param(param, &data.y0, &data.theta, e)?;
        let (truth, _) = crate::sls::true_response_under_mismatch(param, mm, &data.y0, &data.theta, e)?;
        total += one_norm(&(nominal.eta - truth.eta));
    }
    Ok(total / samples.len() as f64)
}
