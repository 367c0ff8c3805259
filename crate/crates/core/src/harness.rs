//! Closed-loop Monte-Carlo comparison of nominal and robust synthesis.
//!
//! The true plant is `x⁺ = A x + B u + w`, `y = C x + D u + v` with bounded
//! uniform noise. Innovations are measured with the fixed observer gain `L`
//! of the true model. Each model draw perturbs `(A, B, C)`, keeps the draw
//! only if its lifted operators stay within the uncertainty budget,
//! synthesizes both policies on it and runs them on the true plant with the
//! same noise realization.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{induced_one_norm, one_norm};
use crate::lti::{
    free_response_offset, predictor_decay_check, predictor_markov_params, stacked_operators, InnovationModel,
    PastWindow, StackedOperators,
};
use crate::sls::{AffinePolicy, ClosedLoopResponse, Layout};
use crate::synthesis::{
    grid_search, solve_nominal, ConstraintSpec, CostSpec, Method, NominalMode, PredictionData, SampleSet, StagePiece,
    SynthesisResult, UncertaintyBudget,
};

/// Trajectories are clipped at this magnitude for cost reporting.
pub const CLIP: f64 = 1e9;
/// A stage counts as violated when `g_k(η) > VIOLATION_TOL`.
pub const VIOLATION_TOL: f64 = 1e-9;

/// Independent uniform noise on each element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl DisturbanceSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let spec = Self { lower, upper };
        spec.validate("disturbance")?;
        Ok(spec)
    }

    pub fn symmetric(dim: usize, bound: f64) -> Result<Self> {
        Self::new(vec![-bound; dim], vec![bound; dim])
    }

    pub fn zero(dim: usize) -> Self {
        Self { lower: vec![0.0; dim], upper: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    fn validate(&self, field: &str) -> Result<()> {
        if self.lower.len() != self.upper.len() {
            return Err(Error::invalid(field, "lower and upper bounds differ in length"));
        }
        for (lo, hi) in self.lower.iter().zip(&self.upper) {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::invalid(field, format!("bad interval [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.lower.iter().zip(&self.upper).map(|(&lo, &hi)| if lo == hi { lo } else { rng.gen_range(lo..=hi) }),
        )
    }
}

/// The plant used for simulation. `model.l` is the observer gain used to
/// extract innovations; it does not enter the plant dynamics.
#[derive(Debug, Clone)]
pub struct TrueSystem {
    pub model: InnovationModel,
    pub process: DisturbanceSpec,
    pub measurement: DisturbanceSpec,
}

impl TrueSystem {
    pub fn new(model: InnovationModel, process: DisturbanceSpec, measurement: DisturbanceSpec) -> Result<Self> {
        process.validate("process noise")?;
        measurement.validate("measurement noise")?;
        if process.dim() != model.n() || measurement.dim() != model.q() {
            return Err(Error::dim(format!(
                "noise dimensions ({}, {}) do not match (n, q) = ({}, {})",
                process.dim(),
                measurement.dim(),
                model.n(),
                model.q()
            )));
        }
        Ok(Self { model, process, measurement })
    }

    /// One plant step: returns `y` and advances `x` in place.
    fn step(&self, x: &mut DVector<f64>, u: &DVector<f64>, w: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let m = &self.model;
        let y = &m.c * &*x + &m.d * u + v;
        *x = &m.a * &*x + &m.b * u + w;
        y
    }

    /// Observer step `x̂⁺ = A x̂ + B u + L e` with `e = y − C x̂ − D u`;
    /// returns `e`.
    fn observe(&self, xhat: &mut DVector<f64>, u: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let m = &self.model;
        let e = y - &m.c * &*xhat - &m.d * u;
        *xhat = &m.a * &*xhat + &m.b * u + &m.l * &e;
        e
    }
}

/// Noise realization for the prediction window `t = 0..=T`.
#[derive(Debug, Clone)]
pub struct NoiseSequence {
    pub w: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
}

impl NoiseSequence {
    pub fn draw(sys: &TrueSystem, steps: usize, rng: &mut impl Rng) -> Self {
        let mut w = Vec::with_capacity(steps);
        let mut v = Vec::with_capacity(steps);
        for _ in 0..steps {
            w.push(sys.process.sample(rng));
            v.push(sys.measurement.sample(rng));
        }
        Self { w, v }
    }

    pub fn zero(sys: &TrueSystem, steps: usize) -> Self {
        Self { w: vec![DVector::zeros(sys.model.n()); steps], v: vec![DVector::zeros(sys.model.q()); steps] }
    }
}

/// State of the true plant and its observer after a warm-up of `τ` steps
/// from `x = x̂ = 0`.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub window: PastWindow,
    pub x0: DVector<f64>,
    pub xhat0: DVector<f64>,
}

/// Runs the plant for `τ` steps with i.i.d. inputs uniform on `input`.
pub fn warm_up(sys: &TrueSystem, tau: usize, input: (f64, f64), rng: &mut impl Rng) -> Result<WarmStart> {
    let (m, q) = (sys.model.m(), sys.model.q());
    let inputs = DisturbanceSpec::new(vec![input.0; m], vec![input.1; m])?;
    let mut x = DVector::zeros(sys.model.n());
    let mut xhat = DVector::zeros(sys.model.n());
    let mut window = PastWindow::zeros(tau, m, q);
    for t in 0..tau {
        let u = inputs.sample(rng);
        let w = sys.process.sample(rng);
        let v = sys.measurement.sample(rng);
        let y = sys.step(&mut x, &u, &w, &v);
        sys.observe(&mut xhat, &u, &y);
        window.u_minus.rows_mut(t * m, m).copy_from(&u);
        window.y_minus.rows_mut(t * q, q).copy_from(&y);
    }
    Ok(WarmStart { window, x0: x, xhat0: xhat })
}

/// Innovation samples: each sample warms up for `τ` steps, then records
/// `e_t` over `t = 0..=T` while the inputs stay random.
pub fn generate_innovation_samples(
    sys: &TrueSystem,
    horizon: usize,
    tau: usize,
    count: usize,
    input: (f64, f64),
    rng: &mut impl Rng,
) -> Result<(SampleSet, Vec<PastWindow>)> {
    if count == 0 {
        return Err(Error::invalid("samples", "at least one innovation sample is required"));
    }
    let (m, q) = (sys.model.m(), sys.model.q());
    let inputs = DisturbanceSpec::new(vec![input.0; m], vec![input.1; m])?;
    let mut samples = Vec::with_capacity(count);
    let mut windows = Vec::with_capacity(count);
    for _ in 0..count {
        let warm = warm_up(sys, tau, input, rng)?;
        let (mut x, mut xhat) = (warm.x0, warm.xhat0);
        let mut e_stack = DVector::zeros((horizon + 1) * q);
        for t in 0..=horizon {
            let u = inputs.sample(rng);
            let w = sys.process.sample(rng);
            let v = sys.measurement.sample(rng);
            let y = sys.step(&mut x, &u, &w, &v);
            let e = sys.observe(&mut xhat, &u, &y);
            e_stack.rows_mut(t * q, q).copy_from(&e);
        }
        samples.push(e_stack);
        windows.push(warm.window);
    }
    Ok((SampleSet::new(samples)?, windows))
}

/// Lifted model `(G, Θ, y0)` of `model` for the window `window`.
pub fn lifted_model(
    model: &InnovationModel,
    horizon: usize,
    tau: usize,
    window: &PastWindow,
) -> Result<PredictionData> {
    let ops = stacked_operators(model, horizon)?;
    let bank = predictor_markov_params(model, tau)?;
    let y0 = free_response_offset(&ops, &bank, window)?;
    PredictionData::new(&ops, y0)
}

/// An accepted nominal model and its realized mismatch
/// `(‖G − Ĝ‖, ‖Θ − Θ̂‖, ‖y0 − ŷ0‖₁)`.
#[derive(Debug, Clone)]
pub struct NominalDraw {
    pub model: InnovationModel,
    pub ops: StackedOperators,
    pub data: PredictionData,
    pub mismatch: (f64, f64, f64),
    pub tries: usize,
}

/// Rejection sampling of `(Â, B̂, Ĉ)`: entries get independent additive
/// uniform noise on `[−scale, scale]`; `D` and `L` are kept. A draw is
/// accepted when all three lifted errors are within the budget.
#[allow(clippy::too_many_arguments)]
pub fn sample_nominal_model(
    sys: &TrueSystem,
    budget: &UncertaintyBudget,
    horizon: usize,
    tau: usize,
    window: &PastWindow,
    scale: f64,
    max_tries: usize,
    rng: &mut impl Rng,
) -> Result<NominalDraw> {
    budget.validate()?;
    let truth = lifted_model(&sys.model, horizon, tau, window)?;
    if budget.gamma1 == 0.0 && budget.gamma2 == 0.0 && budget.gamma3 == 0.0 {
        return Ok(NominalDraw {
            model: sys.model.clone(),
            ops: stacked_operators(&sys.model, horizon)?,
            data: truth,
            mismatch: (0.0, 0.0, 0.0),
            tries: 0,
        });
    }
    let perturb = |m: &DMatrix<f64>, rng: &mut dyn rand::RngCore| {
        m.map(|v| if scale > 0.0 { v + rng.gen_range(-scale..=scale) } else { v })
    };
    for tries in 1..=max_tries {
        let a = perturb(&sys.model.a, rng);
        let b = perturb(&sys.model.b, rng);
        let c = perturb(&sys.model.c, rng);
        let model = InnovationModel::new(a, b, c, sys.model.d.clone(), sys.model.l.clone())?;
        let data = lifted_model(&model, horizon, tau, window)?;
        let mismatch = mismatch_norms(&truth, &data);
        if mismatch.0 <= budget.gamma1 && mismatch.1 <= budget.gamma2 && mismatch.2 <= budget.gamma3 {
            let ops = stacked_operators(&model, horizon)?;
            return Ok(NominalDraw { model, ops, data, mismatch, tries });
        }
    }
    Err(Error::Sampling { tries: max_tries, accepted: 0, rate: 0.0 })
}

/// `(‖G − Ĝ‖, ‖Θ − Θ̂‖, ‖y0 − ŷ0‖₁)`.
pub fn mismatch_norms(truth: &PredictionData, nominal: &PredictionData) -> (f64, f64, f64) {
    (
        induced_one_norm(&(&truth.g - &nominal.g)),
        induced_one_norm(&(&truth.theta - &nominal.theta)),
        one_norm(&(&truth.y0 - &nominal.y0)),
    )
}

/// Fraction of `tries` perturbations that would be accepted.
#[allow(clippy::too_many_arguments)]
pub fn acceptance_rate(
    sys: &TrueSystem,
    budget: &UncertaintyBudget,
    horizon: usize,
    tau: usize,
    window: &PastWindow,
    scale: f64,
    tries: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut accepted = 0;
    for _ in 0..tries {
        if sample_nominal_model(sys, budget, horizon, tau, window, scale, 1, rng).is_ok() {
            accepted += 1;
        }
    }
    Ok(accepted as f64 / tries as f64)
}

/// Everything recorded during one closed-loop run. Index `t` of `y`, `u`,
/// `e` is time `t`; `x` has one extra entry for `T + 1`.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub window: PastWindow,
    pub x: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub e: Vec<DVector<f64>>,
    /// Some signal exceeded [`CLIP`] or became non-finite.
    pub diverged: bool,
}

impl TrajectoryRecord {
    /// `η = col(y, u)`, clipped to `±CLIP`.
    pub fn eta(&self) -> DVector<f64> {
        let clip = |v: f64| if v.is_nan() { CLIP } else { v.clamp(-CLIP, CLIP) };
        let values: Vec<f64> = self
            .y
            .iter()
            .flat_map(|v| v.iter().copied())
            .chain(self.u.iter().flat_map(|v| v.iter().copied()))
            .map(clip)
            .collect();
        DVector::from_vec(values)
    }
}

/// Applies `u_t = Σ_{k<t} K[t,k] y_k + p_t` to the true plant.
pub fn simulate_closed_loop(
    sys: &TrueSystem,
    policy: &AffinePolicy,
    warm: &WarmStart,
    noise: &NoiseSequence,
) -> Result<TrajectoryRecord> {
    let l = policy.layout;
    if l.m != sys.model.m() || l.q != sys.model.q() {
        return Err(Error::dim("policy and plant disagree on (m, q)"));
    }
    if noise.w.len() < l.blocks() || noise.v.len() < l.blocks() {
        return Err(Error::dim(format!(
            "noise covers {} steps, need {}",
            noise.w.len().min(noise.v.len()),
            l.blocks()
        )));
    }
    let q = l.q;
    let mut x = warm.x0.clone();
    let mut xhat = warm.xhat0.clone();
    let mut y_stack = DVector::zeros(l.ny());
    let mut rec = TrajectoryRecord {
        window: warm.window.clone(),
        x: vec![x.clone()],
        y: Vec::new(),
        u: Vec::new(),
        e: Vec::new(),
        diverged: false,
    };
    for t in 0..l.blocks() {
        let u = policy.input_at(t, &y_stack);
        let y = sys.step(&mut x, &u, &noise.w[t], &noise.v[t]);
        let e = sys.observe(&mut xhat, &u, &y);
        y_stack.rows_mut(t * q, q).copy_from(&y);
        let bad = |v: &DVector<f64>| v.iter().any(|s| !s.is_finite() || s.abs() > CLIP);
        rec.diverged |= bad(&x) || bad(&y) || bad(&u);
        rec.x.push(x.clone());
        rec.y.push(y);
        rec.u.push(u);
        rec.e.push(e);
    }
    Ok(rec)
}

/// Runs the policy on the innovation form of `model` itself, driven by the
/// innovation sequence `e` from state `x0`. Under the nominal model this
/// reproduces the synthesis predictions exactly.
pub fn simulate_innovation_form(
    model: &InnovationModel,
    policy: &AffinePolicy,
    x0: &DVector<f64>,
    e: &DVector<f64>,
) -> Result<ClosedLoopResponse> {
    let l = policy.layout;
    if e.len() != l.ny() {
        return Err(Error::dim(format!("innovation has length {}, expected {}", e.len(), l.ny())));
    }
    let (m, q) = (l.m, l.q);
    let mut x = x0.clone();
    let mut y = DVector::zeros(l.ny());
    let mut u = DVector::zeros(l.nu());
    for t in 0..l.blocks() {
        let ut = policy.input_at(t, &y);
        let et = e.rows(t * q, q).into_owned();
        let yt = &model.c * &x + &model.d * &ut + &et;
        x = &model.a * &x + &model.b * &ut + &model.l * &et;
        u.rows_mut(t * m, m).copy_from(&ut);
        y.rows_mut(t * q, q).copy_from(&yt);
    }
    Ok(ClosedLoopResponse::new(y, u))
}

/// One line of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub draw_id: usize,
    pub method: String,
    pub open_loop_cost: Option<f64>,
    pub closed_loop_cost: Option<f64>,
    pub violation_ratio_steps: Option<f64>,
    pub violated: Option<bool>,
    pub status: String,
    pub epsilon_bar: Option<f64>,
    pub rho: Option<f64>,
    pub sigma: Option<f64>,
}

impl MetricsRow {
    fn failed(draw_id: usize, method: &str, status: String) -> Self {
        Self {
            draw_id,
            method: method.to_string(),
            open_loop_cost: None,
            closed_loop_cost: None,
            violation_ratio_steps: None,
            violated: None,
            status,
            epsilon_bar: None,
            rho: None,
            sigma: None,
        }
    }
}

/// Costs and violation statistics of one run. `predicted` is `η̂` at the
/// mean innovation.
pub fn evaluate_metrics(
    draw_id: usize,
    method: &str,
    traj: &TrajectoryRecord,
    predicted: &DVector<f64>,
    cost: &CostSpec,
    constraints: &ConstraintSpec,
) -> MetricsRow {
    let eta = traj.eta();
    let flags = constraints.violations(&eta, VIOLATION_TOL);
    let violated_steps = flags.iter().filter(|f| **f).count();
    let ratio = if flags.is_empty() { 0.0 } else { violated_steps as f64 / flags.len() as f64 };
    MetricsRow {
        draw_id,
        method: method.to_string(),
        open_loop_cost: Some(cost.eval(predicted)),
        closed_loop_cost: Some(cost.eval(&eta)),
        violation_ratio_steps: Some(ratio),
        violated: Some(violated_steps > 0),
        status: if traj.diverged { "clipped".into() } else { "ok".into() },
        epsilon_bar: None,
        rho: None,
        sigma: None,
    }
}

/// Everything a Monte-Carlo run needs besides the true system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloConfig {
    /// Horizon `T`.
    pub horizon: usize,
    /// Past horizon `τ`.
    pub tau: usize,
    /// Innovation samples `N`.
    pub samples: usize,
    /// Model draws `M`.
    pub draws: usize,
    pub budget: UncertaintyBudget,
    pub rho_grid: Vec<f64>,
    pub sigma_grid: Vec<f64>,
    /// Per-channel output and input cost weights.
    pub output_weights: Vec<f64>,
    pub input_weights: Vec<f64>,
    /// Affine pieces applied at every step.
    pub constraint_pieces: Vec<StagePiece>,
    #[serde(default)]
    pub nominal_mode: NominalMode,
    /// Half-width of the additive perturbation on `(A, B, C)` entries.
    pub perturbation_scale: f64,
    pub max_tries: usize,
    /// Input interval while collecting innovation samples.
    pub sample_input: (f64, f64),
    /// Input interval of the warm-up that produces the closed-loop window.
    pub warmup_input: (f64, f64),
    pub seed: u64,
}

impl MonteCarloConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("horizon", self.horizon),
            ("tau", self.tau),
            ("samples", self.samples),
            ("draws", self.draws),
            ("max_tries", self.max_tries),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(name, "must be at least 1"));
            }
        }
        self.budget.validate()?;
        if self.rho_grid.is_empty() || self.sigma_grid.is_empty() {
            return Err(Error::invalid("rho_grid", "ρ and σ grids must be nonempty"));
        }
        for (i, &rho) in self.rho_grid.iter().enumerate() {
            if !(0.0..1.0).contains(&rho) {
                return Err(Error::invalid(format!("rho_grid[{i}]"), format!("must lie in [0, 1), got {rho}")));
            }
        }
        for (i, &sigma) in self.sigma_grid.iter().enumerate() {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::invalid(format!("sigma_grid[{i}]"), format!("must be positive, got {sigma}")));
            }
        }
        if !(self.perturbation_scale >= 0.0 && self.perturbation_scale.is_finite()) {
            return Err(Error::invalid("perturbation_scale", "must be finite and ≥ 0"));
        }
        for (name, (lo, hi)) in [("sample_input", self.sample_input), ("warmup_input", self.warmup_input)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::invalid(name, format!("bad interval [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn layout(&self, sys: &TrueSystem) -> Layout {
        Layout::new(self.horizon, sys.model.m(), sys.model.q())
    }

    pub fn cost(&self, layout: Layout) -> Result<CostSpec> {
        CostSpec::per_channel(layout, &self.output_weights, &self.input_weights)
    }

    pub fn constraints(&self, layout: Layout) -> Result<ConstraintSpec> {
        ConstraintSpec::per_step(layout, &self.constraint_pieces)
    }
}

/// Seeded generator for one named purpose; streams keep purposes and draws
/// independent of each other and of evaluation order.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_SAMPLES: u64 = 0;
const STREAM_WARMUP: u64 = 1;
const STREAM_DRAWS: u64 = 16;

fn model_stream(draw: usize) -> u64 {
    STREAM_DRAWS + 2 * draw as u64
}

fn noise_stream(draw: usize) -> u64 {
    STREAM_DRAWS + 2 * draw as u64 + 1
}

/// Fixed inputs shared by every draw of a run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub samples: SampleSet,
    pub warm: WarmStart,
    pub truth: PredictionData,
    /// `‖(A − LC)^τ‖`.
    pub decay_residual: f64,
}

pub fn prepare_scenario(sys: &TrueSystem, cfg: &MonteCarloConfig) -> Result<Scenario> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, STREAM_SAMPLES);
    let (samples, _) = generate_innovation_samples(sys, cfg.horizon, cfg.tau, cfg.samples, cfg.sample_input, &mut rng)?;
    let warm = warm_up(sys, cfg.tau, cfg.warmup_input, &mut stream_rng(cfg.seed, STREAM_WARMUP))?;
    let truth = lifted_model(&sys.model, cfg.horizon, cfg.tau, &warm.window)?;
    Ok(Scenario { samples, warm, truth, decay_residual: predictor_decay_check(&sys.model, cfg.tau) })
}

/// Both methods' outcome on one model draw.
#[derive(Debug, Clone)]
pub struct DrawOutcome {
    pub draw_id: usize,
    pub nominal: Option<NominalDraw>,
    pub rows: Vec<MetricsRow>,
    pub results: Vec<(Method, Option<SynthesisResult>)>,
    pub trajectories: Vec<(Method, TrajectoryRecord)>,
}

pub fn run_draw(sys: &TrueSystem, cfg: &MonteCarloConfig, scenario: &Scenario, draw_id: usize) -> Result<DrawOutcome> {
    let layout = cfg.layout(sys);
    let cost = cfg.cost(layout)?;
    let constraints = cfg.constraints(layout)?;
    let nominal_method = match cfg.nominal_mode {
        NominalMode::Mean => Method::NominalMean,
        NominalMode::Saa => Method::NominalSaa,
    };
    let methods = [nominal_method, Method::DrSls];

    let mut rng = stream_rng(cfg.seed, model_stream(draw_id));
    let draw = match sample_nominal_model(
        sys,
        &cfg.budget,
        cfg.horizon,
        cfg.tau,
        &scenario.warm.window,
        cfg.perturbation_scale,
        cfg.max_tries,
        &mut rng,
    ) {
        Ok(d) => d,
        Err(Error::Sampling { .. }) => {
            let rows =
                methods.iter().map(|m| MetricsRow::failed(draw_id, m.label(), "sampling-failed".into())).collect();
            return Ok(DrawOutcome {
                draw_id,
                nominal: None,
                rows,
                results: methods.iter().map(|m| (*m, None)).collect(),
                trajectories: Vec::new(),
            });
        }
        Err(e) => return Err(e),
    };

    let noise = NoiseSequence::draw(sys, layout.blocks(), &mut stream_rng(cfg.seed, noise_stream(draw_id)));
    let mean = scenario.samples.mean();
    let mut rows = Vec::new();
    let mut results = Vec::new();
    let mut trajectories = Vec::new();
    for method in methods {
        let outcome = match method {
            Method::DrSls => grid_search(
                &cfg.rho_grid,
                &cfg.sigma_grid,
                &draw.data,
                &scenario.samples,
                &cfg.budget,
                &cost,
                &constraints,
            ),
            _ => solve_nominal(&draw.data, &scenario.samples, cfg.nominal_mode, &cost, &constraints),
        };
        match outcome {
            Ok(res) => {
                let traj = simulate_closed_loop(sys, &res.policy, &scenario.warm, &noise)?;
                let predicted = res.predict(&draw.data, &mean)?;
                let mut row = evaluate_metrics(draw_id, method.label(), &traj, &predicted, &cost, &constraints);
                if method == Method::DrSls {
                    row.epsilon_bar = Some(res.epsilon_bar);
                    row.rho = res.caps.map(|c| c.rho);
                    row.sigma = res.caps.map(|c| c.sigma);
                }
                rows.push(row);
                trajectories.push((method, traj));
                results.push((method, Some(res)));
            }
            Err(err) => {
                let status = match &err {
                    Error::Solver { status, .. } => status.to_string(),
                    Error::GridInfeasible { best_status, .. } => format!("grid-{best_status}"),
                    Error::Structure(_) | Error::Premise(_) => "post-check-failed".to_string(),
                    _ => return Err(err),
                };
                rows.push(MetricsRow::failed(draw_id, method.label(), status));
                results.push((method, None));
            }
        }
    }
    Ok(DrawOutcome { draw_id, nominal: Some(draw), rows, results, trajectories })
}

/// Per-method aggregate of a metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub runs: usize,
    pub failures: usize,
    pub violated_runs: usize,
    pub mean_open_loop_cost: Option<f64>,
    pub mean_closed_loop_cost: Option<f64>,
    pub median_closed_loop_cost: Option<f64>,
    pub mean_violation_ratio_steps: Option<f64>,
}

pub fn summarize(rows: &[MetricsRow]) -> Vec<MethodSummary> {
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    methods
        .into_iter()
        .map(|m| {
            let mine: Vec<&MetricsRow> = rows.iter().filter(|r| r.method == m).collect();
            let ok: Vec<&MetricsRow> = mine.iter().copied().filter(|r| r.violated.is_some()).collect();
            let mean = |f: &dyn Fn(&MetricsRow) -> Option<f64>| {
                let vals: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            };
            let mut closed: Vec<f64> = ok.iter().filter_map(|r| r.closed_loop_cost).collect();
            closed.sort_by(f64::total_cmp);
            MethodSummary {
                method: m.to_string(),
                runs: mine.len(),
                failures: mine.len() - ok.len(),
                violated_runs: ok.iter().filter(|r| r.violated == Some(true)).count(),
                mean_open_loop_cost: mean(&|r| r.open_loop_cost),
                mean_closed_loop_cost: mean(&|r| r.closed_loop_cost),
                median_closed_loop_cost: median(&closed),
                mean_violation_ratio_steps: mean(&|r| r.violation_ratio_steps),
            }
        })
        .collect()
}

pub fn median(sorted: &[f64]) -> Option<f64> {
    let n = sorted.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(sorted[n / 2]),
        _ => Some(0.5 * (sorted[n / 2 - 1] + sorted[n / 2])),
    }
}

#[derive(Debug, Clone)]
pub struct MonteCarloOutput {
    pub scenario: Scenario,
    pub draws: Vec<DrawOutcome>,
}

impl MonteCarloOutput {
    pub fn rows(&self) -> Vec<MetricsRow> {
        self.draws.iter().flat_map(|d| d.rows.iter().cloned()).collect()
    }

    pub fn summary(&self) -> Vec<MethodSummary> {
        summarize(&self.rows())
    }
}

/// Runs all draws in parallel; output is in draw order.
pub fn monte_carlo(sys: &TrueSystem, cfg: &MonteCarloConfig) -> Result<MonteCarloOutput> {
    let scenario = prepare_scenario(sys, cfg)?;
    let draws = (0..cfg.draws).into_par_iter().map(|d| run_draw(sys, cfg, &scenario, d)).collect::<Result<Vec<_>>>()?;
    Ok(MonteCarloOutput { scenario, draws })
}

/// Metrics table as CSV.
pub fn metrics_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Long-format trajectories: `draw_id, method, t, signal, value`.
pub fn trajectories_csv(draws: &[DrawOutcome]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record(["draw_id", "method", "t", "signal", "value"]).map_err(io)?;
    for d in draws {
        for (method, traj) in &d.trajectories {
            for (t, (y, u)) in traj.y.iter().zip(&traj.u).enumerate() {
                for (name, v) in [("y", y), ("u", u)] {
                    for (j, x) in v.iter().enumerate() {
                        let signal = if v.len() == 1 { name.to_string() } else { format!("{name}{j}") };
                        w.write_record([
                            d.draw_id.to_string(),
                            method.label().to_string(),
                            t.to_string(),
                            signal,
                            x.to_string(),
                        ])
                        .map_err(io)?;
                    }
                }
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
