#![allow(dead_code)]
// The benchmark C entry is the literal 1.4142, not √2.
#![allow(clippy::approx_constant)]

use drsls::harness::{DisturbanceSpec, TrueSystem};
use drsls::lti::InnovationModel;
use drsls::sls::{AffinePolicy, Layout};
use drsls::synthesis::{ConstraintSpec, CostSpec, PredictionData, SampleSet, StagePiece, UncertaintyBudget};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub fn s(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

/// A = 0.5, B = 1, C = 1, D = 0, L = 0.25.
pub fn scalar_one() -> InnovationModel {
    InnovationModel::new(s(0.5), s(1.0), s(1.0), s(0.0), s(0.25)).unwrap()
}

pub fn benchmark_model() -> InnovationModel {
    InnovationModel::new(
        DMatrix::from_row_slice(2, 2, &[0.7326, -0.0861, 0.1722, 0.9909]),
        DMatrix::from_row_slice(2, 1, &[0.0609, 0.0]),
        DMatrix::from_row_slice(1, 2, &[0.0, 1.4142]),
        DMatrix::zeros(1, 1),
        DMatrix::from_row_slice(2, 1, &[0.1, 0.1]),
    )
    .unwrap()
}

pub fn benchmark_system() -> TrueSystem {
    TrueSystem::new(
        benchmark_model(),
        DisturbanceSpec::symmetric(2, 0.01).unwrap(),
        DisturbanceSpec::symmetric(1, 0.01).unwrap(),
    )
    .unwrap()
}

pub fn benchmark_budget() -> UncertaintyBudget {
    UncertaintyBudget { gamma1: 0.01, gamma2: 0.01, gamma3: 0.01, kappa: 0.005 }
}

/// `y ≥ −0.01` and `|u| ≤ 1` at every step.
pub fn benchmark_pieces() -> Vec<StagePiece> {
    vec![
        StagePiece { y: vec![-1.0], u: vec![0.0], constant: -0.01 },
        StagePiece { y: vec![0.0], u: vec![1.0], constant: -1.0 },
        StagePiece { y: vec![0.0], u: vec![-1.0], constant: -1.0 },
    ]
}

pub fn benchmark_cost(l: Layout) -> CostSpec {
    CostSpec::per_channel(l, &[1.0], &[0.1]).unwrap()
}

pub fn benchmark_constraints(l: Layout) -> ConstraintSpec {
    ConstraintSpec::per_step(l, &benchmark_pieces()).unwrap()
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..=scale))
}

pub fn random_vector(len: usize, scale: f64, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.gen_range(-scale..=scale))
}

/// Random matrix that is zero outside the block lower triangle
/// (`strict` also zeroes the diagonal blocks).
pub fn random_block_lower(
    blocks: usize,
    row_size: usize,
    col_size: usize,
    strict: bool,
    scale: f64,
    rng: &mut impl Rng,
) -> DMatrix<f64> {
    DMatrix::from_fn(blocks * row_size, blocks * col_size, |r, c| {
        let (i, j) = (r / row_size, c / col_size);
        if j < i || (!strict && j == i) {
            rng.gen_range(-scale..=scale)
        } else {
            0.0
        }
    })
}

/// Random stable model with `n, m, q ≤ 3`.
pub fn random_model(rng: &mut impl Rng) -> InnovationModel {
    let n = rng.gen_range(1..=3);
    let m = rng.gen_range(1..=3);
    let q = rng.gen_range(1..=3);
    let a = random_matrix(n, n, 0.9 / n as f64, rng);
    InnovationModel::new(
        a,
        random_matrix(n, m, 1.0, rng),
        random_matrix(q, n, 1.0, rng),
        random_matrix(q, m, 0.5, rng),
        random_matrix(n, q, 0.2, rng),
    )
    .unwrap()
}

pub fn induced_one(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols()).map(|c| m.column(c).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

pub fn l1(v: &DVector<f64>) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// SCALAR-1 at `T = 2`: `G`, `Θ` written out by hand.
pub fn scalar_t2_data() -> PredictionData {
    let g = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.5, 1.0, 0.0]);
    let theta = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.25, 1.0, 0.0, 0.125, 0.25, 1.0]);
    let y0 = DVector::from_vec(vec![1.0, 0.5, 0.25]);
    PredictionData::from_parts(Layout::new(2, 1, 1), g, theta, y0).unwrap()
}

pub fn scalar_samples() -> SampleSet {
    SampleSet::new(vec![DVector::from_vec(vec![0.1, -0.05, 0.02]), DVector::from_vec(vec![-0.08, 0.03, 0.06])]).unwrap()
}

pub fn scalar_budget() -> UncertaintyBudget {
    UncertaintyBudget { gamma1: 0.05, gamma2: 0.02, gamma3: 0.02, kappa: 0.01 }
}

/// `u_t = Σ_{k<t} K y_k + p_t`, `y = G u + z` stepped one block at a time.
pub fn simulate_lifted(policy: &AffinePolicy, g: &DMatrix<f64>, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let l = policy.layout;
    let (m, q) = (l.m, l.q);
    let mut y = DVector::zeros(l.ny());
    let mut u = DVector::zeros(l.nu());
    for t in 0..l.blocks() {
        for r in 0..m {
            let mut v = policy.bias[t * m + r];
            for c in 0..t * q {
                v += policy.gain[(t * m + r, c)] * y[c];
            }
            u[t * m + r] = v;
        }
        for r in 0..q {
            let mut v = z[t * q + r];
            for c in 0..(t + 1) * m {
                v += g[(t * q + r, c)] * u[c];
            }
            y[t * q + r] = v;
        }
    }
    (y, u)
}

/// DR objective of SCALAR-1 (`T = 2`, `N = 2`) as a function of the free
/// parameters `(Φu[1,0], φu[0], φu[1])`; the last input row is zero, which
/// is never worse since `u[2]` does not reach the outputs.
pub fn scalar_brute_objective(a: f64, b0: f64, b1: f64, rho: f64, sigma: f64) -> Option<f64> {
    let budget = scalar_budget();
    if 1.0 + a.abs() > sigma + 1e-12 || budget.gamma1 * a.abs() > rho + 1e-12 {
        return None;
    }
    let y0 = [1.0, 0.5, 0.25];
    let theta = [[1.0, 0.0, 0.0], [0.25, 1.0, 0.0], [0.125, 0.25, 1.0]];
    let samples = [[0.1, -0.05, 0.02], [-0.08, 0.03, 0.06]];
    let n = samples.len() as f64;
    let z: Vec<[f64; 3]> = samples
        .iter()
        .map(|e| {
            let mut z = y0;
            for r in 0..3 {
                for c in 0..3 {
                    z[r] += theta[r][c] * e[c];
                }
            }
            z
        })
        .collect();
    let sum: f64 = z
        .iter()
        .zip(&samples)
        .map(|(zi, ei)| {
            rho * zi.iter().map(|v| v.abs()).sum::<f64>() + budget.gamma2 * ei.iter().map(|v| v.abs()).sum::<f64>()
        })
        .sum();
    let c_map = (sum + n * budget.gamma3) / (n * (1.0 - rho)) + budget.kappa * (1.375 + budget.gamma2) / (1.0 - rho);
    let c_off = (rho / budget.gamma1 + sigma) * budget.gamma1 / (1.0 - rho);
    // Φy = I + GΦu has a in entry (2, 0); column 0 of [Φy; Φu] sums to 1 + 2|a|.
    let eps = c_map * (1.0 + 2.0 * a.abs()) + c_off * (b0.abs() + b1.abs());

    let mut cost = 0.0;
    let mut q = [0.0; 3];
    for zi in &z {
        let u = [b0, a * zi[0] + b1, 0.0];
        let y = [zi[0], zi[1] + u[0], zi[2] + 0.5 * u[0] + u[1]];
        cost += y.iter().map(|v| v.abs()).sum::<f64>() + 0.1 * u.iter().map(|v| v.abs()).sum::<f64>();
        for k in 0..3 {
            q[k] += f64::max(-y[k] - 0.01, f64::max(u[k] - 1.0, -u[k] - 1.0));
        }
    }
    if q.iter().any(|qk| eps + qk / n > 1e-12) {
        return None;
    }
    Some(eps + cost / n)
}

pub fn brute_force(rho: f64, sigma: f64) -> f64 {
    let a_max = (rho / scalar_budget().gamma1).min(sigma - 1.0);
    let grid = |lo: f64, hi: f64, step: f64| {
        let n = ((hi - lo) / step).round() as i64;
        (0..=n).map(move |i| lo + i as f64 * step)
    };
    let mut best = (f64::INFINITY, 0.0, 0.0, 0.0);
    for a in grid(-a_max, a_max, 1e-2) {
        for b0 in grid(-1.0, 1.0, 1e-2) {
            for b1 in grid(-3.0, 3.0, 1e-2) {
                if let Some(v) = scalar_brute_objective(a, b0, b1, rho, sigma) {
                    if v < best.0 {
                        best = (v, a, b0, b1);
                    }
                }
            }
        }
    }
    let (_, a, b0, b1) = best;
    for a in grid((a - 0.02).max(-a_max), (a + 0.02).min(a_max), 1e-3) {
        for b0 in grid(b0 - 0.02, b0 + 0.02, 1e-3) {
            for b1 in grid(b1 - 0.02, b1 + 0.02, 1e-3) {
                if let Some(v) = scalar_brute_objective(a, b0, b1, rho, sigma) {
                    best.0 = best.0.min(v);
                }
            }
        }
    }
    best.0
}
