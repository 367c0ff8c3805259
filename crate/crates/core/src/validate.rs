//! Property suites run against a configured problem: policy round trips,
//! subspace residuals, the mismatch response identity, the shift-term
//! bounds and the harness wiring.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::harness::{prepare_scenario, simulate_innovation_form, stream_rng, MonteCarloConfig, Scenario, TrueSystem};
use crate::linalg::{induced_one_norm, one_norm};
use crate::lti::{predictor_markov_params, DEFAULT_DECAY_THRESHOLD};
use crate::sls::{
    extract_policy, params_from_policy, response_from_param, response_from_policy, true_response_under_mismatch,
    validate_structure, validate_subspace, AffinePolicy, Layout, MismatchRealization, SlsParam,
};
use crate::synthesis::{
    eval_radius_bound, paired_shift, shift_term_bounds, shift_terms, GainCaps, PredictionData, UncertaintyBudget,
};
use crate::Result;

pub const ROUND_TRIP_TOL: f64 = 1e-8;
pub const SUBSPACE_TOL: f64 = 1e-10;
pub const RESPONSE_TOL: f64 = 1e-8;

const STREAM_VALIDATE: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteOutcome {
    pub name: String,
    pub checks: usize,
    pub failures: usize,
    /// Largest error (or bound excess) seen.
    pub worst: f64,
    pub tolerance: f64,
}

impl SuiteOutcome {
    fn new(name: &str, tolerance: f64) -> Self {
        Self { name: name.into(), checks: 0, failures: 0, worst: 0.0, tolerance }
    }

    fn record(&mut self, err: f64) {
        self.checks += 1;
        self.worst = self.worst.max(err);
        // NaN counts as a failure.
        if err.is_nan() || err > self.tolerance {
            self.failures += 1;
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub suites: Vec<SuiteOutcome>,
    pub warnings: Vec<String>,
    pub decay_residual: f64,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteOutcome::passed)
    }
}

/// Strictly causal gain with entries in `[−scale, scale]` and bias in `[−1, 1]`.
pub fn random_policy(layout: Layout, scale: f64, rng: &mut impl Rng) -> AffinePolicy {
    let (m, q) = (layout.m, layout.q);
    let gain =
        DMatrix::from_fn(
            layout.nu(),
            layout.ny(),
            |r, c| {
                if c / q < r / m {
                    rng.gen_range(-scale..=scale)
                } else {
                    0.0
                }
            },
        );
    let bias = DVector::from_fn(layout.nu(), |_, _| rng.gen_range(-1.0..=1.0));
    AffinePolicy::new(layout, gain, bias).expect("gain is strictly causal")
}

fn scaled_to(m: DMatrix<f64>, norm: f64) -> DMatrix<f64> {
    let current = induced_one_norm(&m);
    if current > 0.0 {
        m * (norm / current)
    } else {
        m
    }
}

/// Mismatch with `‖Δ‖ ≤ γ₁`, `‖Θ̃‖ ≤ γ₂`, `‖ỹ0‖₁ ≤ γ₃`. `Δ` and `Θ̃` are
/// block strictly lower, like the difference of two lifted models with
/// equal `D`.
pub fn random_mismatch(layout: Layout, budget: &UncertaintyBudget, rng: &mut impl Rng) -> MismatchRealization {
    let (nb, m, q) = (layout.blocks(), layout.m, layout.q);
    let lower = |rows: usize, cols: usize, rng: &mut dyn rand::RngCore| {
        DMatrix::from_fn(nb * rows, nb * cols, |r, c| if c / cols < r / rows { rng.gen_range(-1.0..=1.0) } else { 0.0 })
    };
    let delta = lower(q, m, rng);
    let delta = scaled_to(delta, rng.gen_range(0.0..=1.0) * budget.gamma1);
    let theta_err = lower(q, q, rng);
    let theta_err = scaled_to(theta_err, rng.gen_range(0.0..=1.0) * budget.gamma2);
    let y0_dir = DVector::from_fn(layout.ny(), |_, _| rng.gen_range(-1.0..=1.0));
    let y0_err = &y0_dir * (rng.gen_range(0.0..=1.0) * budget.gamma3 / one_norm(&y0_dir).max(f64::MIN_POSITIVE));
    MismatchRealization { delta, theta_err, y0_err }
}

/// Tightest caps under which the radius bound applies to `param`.
pub fn caps_for(param: &SlsParam, budget: &UncertaintyBudget) -> Option<GainCaps> {
    let rho = budget.gamma1 * induced_one_norm(&param.map_u);
    GainCaps::new(rho, induced_one_norm(&param.map_y)).ok()
}

/// Realized shift terms against their bounds for one mismatch. Returns the
/// largest excess of a term over its bound, and the excess of the paired
/// shift plus the realized fourth term over the radius bound.
pub fn term_bound_excess(
    param: &SlsParam,
    caps: &GainCaps,
    mm: &MismatchRealization,
    data: &PredictionData,
    samples: &crate::synthesis::SampleSet,
    budget: &UncertaintyBudget,
) -> Result<(f64, f64)> {
    let bounds = shift_term_bounds(param, data, samples, budget, caps)?;
    let realized = shift_terms(param, mm, data, samples, budget.kappa)?;
    let mut excess = f64::NEG_INFINITY;
    for i in 0..samples.len() {
        excess = excess.max(realized.term1[i] - bounds.term1[i]);
        excess = excess.max(realized.term2[i] - bounds.term2[i]);
    }
    excess = excess.max(realized.term3 - bounds.term3).max(realized.term4 - bounds.term4);
    let radius = eval_radius_bound(param, data, samples, budget, caps)?;
    let shift = paired_shift(param, mm, data, samples)?;
    Ok((excess, shift + realized.term4 - radius))
}

/// Runs every suite with `draws` random cases each on the scenario the
/// configuration describes.
pub fn run_suites(sys: &TrueSystem, cfg: &MonteCarloConfig, draws: usize) -> Result<ValidationReport> {
    let scenario = prepare_scenario(sys, cfg)?;
    run_suites_on(sys, cfg, &scenario, draws)
}

pub fn run_suites_on(
    sys: &TrueSystem,
    cfg: &MonteCarloConfig,
    scenario: &Scenario,
    draws: usize,
) -> Result<ValidationReport> {
    let layout = cfg.layout(sys);
    let data = &scenario.truth;
    let mut rng = stream_rng(cfg.seed, STREAM_VALIDATE);

    let mut round_trip = SuiteOutcome::new("policy-round-trip", ROUND_TRIP_TOL);
    let mut subspace = SuiteOutcome::new("subspace-residual", SUBSPACE_TOL);
    let mut mismatch = SuiteOutcome::new("mismatch-response", RESPONSE_TOL);
    let mut terms = SuiteOutcome::new("shift-term-bounds", 0.0);
    let mut radius = SuiteOutcome::new("radius-covers-shift", 0.0);
    let mut wiring = SuiteOutcome::new("innovation-form-wiring", RESPONSE_TOL);

    let x0 = predictor_markov_params(&sys.model, cfg.tau)?.state_estimate(&scenario.warm.window)?;
    for _ in 0..draws {
        let policy = random_policy(layout, 1.0, &mut rng);
        let param = params_from_policy(&policy, &data.g)?;
        let back = extract_policy(&param)?;
        round_trip.record((&back.gain - &policy.gain).amax().max((&back.bias - &policy.bias).amax()));
        let structural = if validate_structure(&param, SUBSPACE_TOL)? { 0.0 } else { f64::INFINITY };
        subspace.record(validate_subspace(&data.g, &param)?.max(structural));

        let e = &scenario.samples.samples()[rng.gen_range(0..scenario.samples.len())];
        let nominal = response_from_param(&param, &data.y0, &data.theta, e)?;
        let simulated = simulate_innovation_form(&sys.model, &policy, &x0, e)?;
        wiring.record((&nominal.y - &simulated.y).amax().max((&nominal.u - &simulated.u).amax()));

        // ‖Δ‖ ≤ 0.5 / ‖Φu‖ keeps I − ΔΦu well conditioned.
        let limit = 0.5 / induced_one_norm(&param.map_u).max(1e-12);
        let big = UncertaintyBudget { gamma1: limit, gamma2: 0.1, gamma3: 0.1, kappa: 0.0 };
        let mm = random_mismatch(layout, &big, &mut rng);
        let (truth, _) = true_response_under_mismatch(&param, &mm, &data.y0, &data.theta, e)?;
        let direct = response_from_policy(
            &policy,
            &(&data.g + &mm.delta),
            &(&data.y0 + &mm.y0_err),
            &(&data.theta + &mm.theta_err),
            e,
        )?;
        mismatch.record((&truth.y - &direct.y).amax().max((&truth.u - &direct.u).amax()));

        // Small gains keep γ₁‖Φu‖ < 1 so the bound's premises hold.
        let modest = random_policy(layout, 0.3, &mut rng);
        let param = params_from_policy(&modest, &data.g)?;
        if let Some(caps) = caps_for(&param, &cfg.budget) {
            let mm = random_mismatch(layout, &cfg.budget, &mut rng);
            let (term_excess, radius_excess) =
                term_bound_excess(&param, &caps, &mm, data, &scenario.samples, &cfg.budget)?;
            terms.record(term_excess.max(0.0));
            radius.record(radius_excess.max(0.0));
        }
    }

    let mut warnings = Vec::new();
    if scenario.decay_residual > DEFAULT_DECAY_THRESHOLD {
        warnings.push(format!(
            "‖(A − LC)^τ‖ = {:.3e} at τ = {} exceeds {:.0e}; the free response ignores that part of the initial state",
            scenario.decay_residual, cfg.tau, DEFAULT_DECAY_THRESHOLD
        ));
    }
    Ok(ValidationReport {
        suites: vec![round_trip, subspace, mismatch, terms, radius, wiring],
        warnings,
        decay_residual: scenario.decay_residual,
    })
}
