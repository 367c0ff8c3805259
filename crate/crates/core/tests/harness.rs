//! Monte-Carlo harness wiring and bookkeeping.

mod common;

use common::*;
use drsls::harness::*;
use drsls::lti::{predictor_markov_params, stacked_operators};
use drsls::sls::{params_from_policy, response_from_param, AffinePolicy, Layout};
use drsls::synthesis::{NominalMode, UncertaintyBudget};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn innovation_form_simulation_reproduces_predictions() {
    let model = benchmark_model();
    let (horizon, tau) = (15, 25);
    let sys = benchmark_system();
    let warm = warm_up(&sys, tau, (-1.0, 1.0), &mut stream_rng(9, 1)).unwrap();
    let data = lifted_model(&model, horizon, tau, &warm.window).unwrap();
    let x0 = predictor_markov_params(&model, tau).unwrap().state_estimate(&warm.window).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let l = Layout::new(horizon, 1, 1);
    for _ in 0..5 {
        let gain = random_block_lower(l.blocks(), 1, 1, true, 0.5, &mut rng);
        let policy = AffinePolicy::new(l, gain, random_vector(l.nu(), 0.5, &mut rng)).unwrap();
        let param = params_from_policy(&policy, &data.g).unwrap();
        let e = random_vector(l.ny(), 0.02, &mut rng);
        let predicted = response_from_param(&param, &data.y0, &data.theta, &e).unwrap();
        let simulated = simulate_innovation_form(&model, &policy, &x0, &e).unwrap();
        assert!((predicted.y - simulated.y).amax() <= 1e-8);
        assert!((predicted.u - simulated.u).amax() <= 1e-8);
    }
}

#[test]
fn innovations_respect_interval_propagation_bound() {
    let sys = benchmark_system();
    let (horizon, tau) = (15, 25);
    // x̃ = x − x̂ follows x̃+ = (A − LC)x̃ + w − Lv from x̃ = 0, and e = Cx̃ + v.
    let a_bar = sys.model.predictor_matrix();
    let drive = DVector::from_fn(2, |i, _| 0.01 + sys.model.l[(i, 0)].abs() * 0.01);
    let mut bound = 0.01;
    let mut power = DMatrix::identity(2, 2);
    for _ in 0..tau + horizon + 1 {
        bound += ((&sys.model.c * &power).abs() * &drive)[0];
        power = &a_bar * power;
    }
    let (samples, windows) =
        generate_innovation_samples(&sys, horizon, tau, 100, (-1.0, 1.0), &mut stream_rng(7, 0)).unwrap();
    assert_eq!(samples.len(), 100);
    assert_eq!(windows.len(), 100);
    for e in samples.samples() {
        assert_eq!(e.len(), 16);
        assert!(e.amax() <= bound, "{} above {bound}", e.amax());
    }
}

#[test]
fn zero_budget_returns_the_true_model() {
    let sys = benchmark_system();
    let window = warm_up(&sys, 25, (0.0, 1.0), &mut stream_rng(1, 1)).unwrap().window;
    let draw =
        sample_nominal_model(&sys, &UncertaintyBudget::zero(), 15, 25, &window, 0.002, 10, &mut stream_rng(1, 2))
            .unwrap();
    assert_eq!(draw.model, sys.model);
    assert_eq!(draw.mismatch, (0.0, 0.0, 0.0));
}

#[test]
fn accepted_models_are_certified_by_recomputation() {
    let sys = benchmark_system();
    let budget = benchmark_budget();
    let (horizon, tau) = (15, 25);
    let window = warm_up(&sys, tau, (0.0, 1.0), &mut stream_rng(2, 1)).unwrap().window;
    let truth_ops = stacked_operators(&sys.model, horizon).unwrap();
    let truth = lifted_model(&sys.model, horizon, tau, &window).unwrap();
    let mut rng = stream_rng(2, 5);
    for _ in 0..5 {
        let draw = sample_nominal_model(&sys, &budget, horizon, tau, &window, 0.002, 100_000, &mut rng).unwrap();
        let ops = stacked_operators(&draw.model, horizon).unwrap();
        let dg = induced_one(&(&truth_ops.g - &ops.g));
        let dt = induced_one(&(&truth_ops.theta - &ops.theta));
        let dy = l1(&(&truth.y0 - &draw.data.y0));
        assert!(dg <= budget.gamma1 && dt <= budget.gamma2 && dy <= budget.gamma3);
        assert!((dg - draw.mismatch.0).abs() < 1e-15);
        assert!((dt - draw.mismatch.1).abs() < 1e-15);
        assert!((dy - draw.mismatch.2).abs() < 1e-15);
        assert_eq!(draw.model.d, sys.model.d);
        assert_eq!(draw.model.l, sys.model.l);
    }
}

#[test]
fn exhausted_sampling_reports_failure() {
    let sys = benchmark_system();
    let window = warm_up(&sys, 25, (0.0, 1.0), &mut stream_rng(2, 1)).unwrap().window;
    let tight = UncertaintyBudget { gamma1: 1e-9, gamma2: 1e-9, gamma3: 1e-9, kappa: 0.0 };
    let err = sample_nominal_model(&sys, &tight, 15, 25, &window, 0.02, 20, &mut stream_rng(2, 3)).unwrap_err();
    assert!(matches!(err, drsls::Error::Sampling { tries: 20, .. }));
}

#[test]
fn zero_policy_without_noise_stays_at_rest() {
    let sys = TrueSystem::new(benchmark_model(), DisturbanceSpec::zero(2), DisturbanceSpec::zero(1)).unwrap();
    let l = Layout::new(5, 1, 1);
    let warm = warm_up(&sys, 3, (0.0, 0.0), &mut stream_rng(0, 0)).unwrap();
    let traj = simulate_closed_loop(&sys, &AffinePolicy::zero(l), &warm, &NoiseSequence::zero(&sys, 6)).unwrap();
    assert!(traj.eta().iter().all(|v| *v == 0.0));
    assert_eq!(traj.x.len(), 7);
    assert!(!traj.diverged);
}

#[test]
fn one_violating_step_gives_one_over_steps() {
    let l = Layout::new(15, 1, 1);
    let sys = TrueSystem::new(benchmark_model(), DisturbanceSpec::zero(2), DisturbanceSpec::zero(1)).unwrap();
    let warm = warm_up(&sys, 2, (0.0, 0.0), &mut stream_rng(0, 0)).unwrap();
    // Only u[3] = 1.5 breaks |u| ≤ 1; the pulse response keeps y above the bound.
    let mut bias = DVector::zeros(16);
    bias[3] = 1.5;
    let policy = AffinePolicy::new(l, DMatrix::zeros(16, 16), bias).unwrap();
    let traj = simulate_closed_loop(&sys, &policy, &warm, &NoiseSequence::zero(&sys, 16)).unwrap();
    assert!(traj.y.iter().all(|y| y[0] >= -0.01));
    let row = evaluate_metrics(0, "N-SLS", &traj, &DVector::zeros(32), &benchmark_cost(l), &benchmark_constraints(l));
    assert_eq!(row.violation_ratio_steps, Some(1.0 / 16.0));
    assert_eq!(row.violated, Some(true));
    assert_eq!(row.open_loop_cost, Some(0.0));
}

#[test]
fn zero_trajectory_has_zero_metrics() {
    let l = Layout::new(3, 1, 1);
    let sys = TrueSystem::new(benchmark_model(), DisturbanceSpec::zero(2), DisturbanceSpec::zero(1)).unwrap();
    let warm = warm_up(&sys, 2, (0.0, 0.0), &mut stream_rng(0, 0)).unwrap();
    let traj = simulate_closed_loop(&sys, &AffinePolicy::zero(l), &warm, &NoiseSequence::zero(&sys, 4)).unwrap();
    let row = evaluate_metrics(0, "DR-SLS", &traj, &DVector::zeros(8), &benchmark_cost(l), &benchmark_constraints(l));
    assert_eq!(row.open_loop_cost, Some(0.0));
    assert_eq!(row.closed_loop_cost, Some(0.0));
    assert_eq!(row.violation_ratio_steps, Some(0.0));
    assert_eq!(row.violated, Some(false));
}

fn small_config(budget: UncertaintyBudget, draws: usize) -> MonteCarloConfig {
    MonteCarloConfig {
        horizon: 4,
        tau: 10,
        samples: 8,
        draws,
        budget,
        rho_grid: vec![0.001, 0.01],
        sigma_grid: vec![1.5],
        output_weights: vec![1.0],
        input_weights: vec![0.1],
        constraint_pieces: benchmark_pieces(),
        nominal_mode: NominalMode::Mean,
        perturbation_scale: 0.002,
        max_tries: 50_000,
        sample_input: (-1.0, 1.0),
        warmup_input: (0.0, 1.0),
        seed: 21,
    }
}

#[test]
fn noiseless_certain_run_treats_both_methods_alike() {
    let sys = TrueSystem::new(benchmark_model(), DisturbanceSpec::zero(2), DisturbanceSpec::zero(1)).unwrap();
    let out = monte_carlo(&sys, &small_config(UncertaintyBudget::zero(), 1)).unwrap();
    let rows = out.rows();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.status == "ok"));
    assert_eq!(rows[0].violated, rows[1].violated);
    let (a, b) = (rows[0].closed_loop_cost.unwrap(), rows[1].closed_loop_cost.unwrap());
    assert!((a - b).abs() <= 1e-6 * a.max(1.0), "{a} vs {b}");
}

#[test]
fn metrics_csv_is_deterministic_and_ordered() {
    let sys = benchmark_system();
    let cfg = small_config(benchmark_budget(), 3);
    let first = monte_carlo(&sys, &cfg).unwrap();
    let second = monte_carlo(&sys, &cfg).unwrap();
    let a = metrics_csv(&first.rows()).unwrap();
    assert_eq!(a, metrics_csv(&second.rows()).unwrap());
    assert_eq!(trajectories_csv(&first.draws).unwrap(), trajectories_csv(&second.draws).unwrap());
    assert!(a.starts_with(
        "draw_id,method,open_loop_cost,closed_loop_cost,violation_ratio_steps,violated,status,epsilon_bar,rho,sigma\n"
    ));
    let ids: Vec<usize> = first.rows().iter().map(|r| r.draw_id).collect();
    assert_eq!(ids, vec![0, 0, 1, 1, 2, 2]);
    let methods: Vec<String> = first.rows().iter().map(|r| r.method.clone()).collect();
    assert_eq!(methods[..2], ["N-SLS".to_string(), "DR-SLS".to_string()]);
}

#[test]
fn both_methods_see_the_same_noise() {
    let sys = benchmark_system();
    let cfg = small_config(benchmark_budget(), 1);
    let scenario = prepare_scenario(&sys, &cfg).unwrap();
    let out = run_draw(&sys, &cfg, &scenario, 0).unwrap();
    assert_eq!(out.trajectories.len(), 2);
    // Same noise and the same starting state: the innovation at t = 0 is
    // independent of the policy.
    let (a, b) = (&out.trajectories[0].1, &out.trajectories[1].1);
    assert_eq!(a.x[0], b.x[0]);
    assert_eq!(a.e[0], b.e[0]);
}

#[test]
fn invalid_rho_is_rejected_by_field() {
    let mut cfg = small_config(benchmark_budget(), 1);
    cfg.rho_grid = vec![0.1, 1.2];
    match cfg.validate() {
        Err(drsls::Error::Validation { field, .. }) => assert_eq!(field, "rho_grid[1]"),
        other => panic!("{other:?}"),
    }
}
