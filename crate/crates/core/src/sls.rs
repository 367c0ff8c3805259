//! Closed-loop response parameterization for strictly causal affine output
//! feedback `u = K y + p`.
//!
//! The maps `(Φy, Φu, φy, φu)` send the uncontrolled output `y0 + Θ e` to
//! the closed-loop outputs and inputs:
//!
//! ```text
//! [y]   [Φy φy] [y0 + Θe]
//! [u] = [Φu φu] [   1   ]
//! ```
//!
//! Every parameterization satisfying `[I  -G]·[Φy φy; Φu φu] = [I 0]` with
//! `Φy` block lower-triangular and `Φu` block strictly lower-triangular is
//! achieved by `K = Φu·Φy⁻¹`, `p = φu - K·φy`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{induced_one_norm, solve_unit_lower, solve_unit_lower_vec, vcat, vstack, BlockShape};
use crate::lti::{from_row_major, row_major};

/// Entries below this magnitude in forbidden blocks are treated as solver noise.
pub const STRUCTURE_TOL: f64 = 1e-9;

/// Sizes shared by every lifted object of one problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    /// Horizon `T`; signals have `T + 1` blocks.
    pub horizon: usize,
    /// Input dimension.
    pub m: usize,
    /// Output dimension.
    pub q: usize,
}

impl Layout {
    pub fn new(horizon: usize, m: usize, q: usize) -> Self {
        Self { horizon, m, q }
    }

    pub fn blocks(&self) -> usize {
        self.horizon + 1
    }

    pub fn ny(&self) -> usize {
        self.blocks() * self.q
    }

    pub fn nu(&self) -> usize {
        self.blocks() * self.m
    }

    /// Length of `η = col(y, u)`.
    pub fn eta_len(&self) -> usize {
        self.ny() + self.nu()
    }

    pub fn yy(&self) -> BlockShape {
        BlockShape::new(self.blocks(), self.q, self.q)
    }

    pub fn uy(&self) -> BlockShape {
        BlockShape::new(self.blocks(), self.m, self.q)
    }

    pub fn yu(&self) -> BlockShape {
        BlockShape::new(self.blocks(), self.q, self.m)
    }

    fn check_vec(&self, v: &DVector<f64>, len: usize, what: &str) -> Result<()> {
        if v.len() != len {
            return Err(Error::dim(format!("{what} has length {}, expected {len}", v.len())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlsParam {
    pub layout: Layout,
    /// `Φy`, `(T+1)q × (T+1)q`.
    pub map_y: DMatrix<f64>,
    /// `Φu`, `(T+1)m × (T+1)q`.
    pub map_u: DMatrix<f64>,
    /// `φy`, length `(T+1)q`.
    pub offset_y: DVector<f64>,
    /// `φu`, length `(T+1)m`.
    pub offset_u: DVector<f64>,
}

impl SlsParam {
    /// Checks shapes only; structure is checked by [`validate_structure`].
    pub fn new(
        layout: Layout,
        map_y: DMatrix<f64>,
        map_u: DMatrix<f64>,
        offset_y: DVector<f64>,
        offset_u: DVector<f64>,
    ) -> Result<Self> {
        layout.yy().check(&map_y, "Φy")?;
        layout.uy().check(&map_u, "Φu")?;
        layout.check_vec(&offset_y, layout.ny(), "φy")?;
        layout.check_vec(&offset_u, layout.nu(), "φu")?;
        Ok(Self { layout, map_y, map_u, offset_y, offset_u })
    }

    /// Open-loop parameterization `Φy = I`, `Φu = 0`, `φ = 0`.
    pub fn identity(layout: Layout) -> Self {
        Self {
            layout,
            map_y: DMatrix::identity(layout.ny(), layout.ny()),
            map_u: DMatrix::zeros(layout.nu(), layout.ny()),
            offset_y: DVector::zeros(layout.ny()),
            offset_u: DVector::zeros(layout.nu()),
        }
    }

    /// Builds a parameterization from raw solver values, clearing forbidden
    /// blocks that hold only noise and refusing anything larger.
    pub fn from_solver_values(
        layout: Layout,
        mut map_y: DMatrix<f64>,
        mut map_u: DMatrix<f64>,
        offset_y: DVector<f64>,
        offset_u: DVector<f64>,
        tol: f64,
    ) -> Result<Self> {
        let yy = layout.yy();
        let uy = layout.uy();
        yy.check(&map_y, "Φy")?;
        uy.check(&map_u, "Φu")?;
        let worst_y = yy.acausal_max_abs(&map_y, false);
        let worst_u = uy.acausal_max_abs(&map_u, true);
        if worst_y > tol || worst_u > tol {
            return Err(Error::Structure(format!(
                "solver output breaks causality (Φy: {worst_y:.3e}, Φu: {worst_u:.3e})"
            )));
        }
        yy.zero_acausal(&mut map_y, false);
        uy.zero_acausal(&mut map_u, true);
        Self::new(layout, map_y, map_u, offset_y, offset_u)
    }

    /// `Φ = [Φy; Φu]`.
    pub fn stacked_map(&self) -> DMatrix<f64> {
        vstack(&self.map_y, &self.map_u)
    }

    /// `φ = col(φy, φu)`.
    pub fn stacked_offset(&self) -> DVector<f64> {
        vcat(&self.offset_y, &self.offset_u)
    }

    pub fn to_document(&self) -> ParamDocument {
        ParamDocument {
            horizon: self.layout.horizon,
            m: self.layout.m,
            q: self.layout.q,
            phi_y_map: row_major(&self.map_y),
            phi_u_map: row_major(&self.map_u),
            phi_y: self.offset_y.as_slice().to_vec(),
            phi_u: self.offset_u.as_slice().to_vec(),
        }
    }

    pub fn from_document(doc: ParamDocument) -> Result<Self> {
        let layout = Layout::new(doc.horizon, doc.m, doc.q);
        Self::new(
            layout,
            from_row_major(layout.ny(), layout.ny(), doc.phi_y_map, "Phi_y")?,
            from_row_major(layout.nu(), layout.ny(), doc.phi_u_map, "Phi_u")?,
            DVector::from_vec(doc.phi_y),
            DVector::from_vec(doc.phi_u),
        )
    }
}

/// Flat document form of [`SlsParam`] (row-major matrices).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamDocument {
    #[serde(rename = "T")]
    pub horizon: usize,
    pub m: usize,
    pub q: usize,
    #[serde(rename = "Phi_y")]
    pub phi_y_map: Vec<f64>,
    #[serde(rename = "Phi_u")]
    pub phi_u_map: Vec<f64>,
    pub phi_y: Vec<f64>,
    pub phi_u: Vec<f64>,
}

/// `u = K y + p` with `K` block strictly lower-triangular.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePolicy {
    pub layout: Layout,
    pub gain: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl AffinePolicy {
    pub fn new(layout: Layout, gain: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        layout.uy().check(&gain, "K")?;
        layout.check_vec(&bias, layout.nu(), "p")?;
        let worst = layout.uy().acausal_max_abs(&gain, true);
        if worst > 0.0 {
            return Err(Error::Structure(format!("K is not strictly causal (max forbidden entry {worst:.3e})")));
        }
        Ok(Self { layout, gain, bias })
    }

    pub fn zero(layout: Layout) -> Self {
        Self { layout, gain: DMatrix::zeros(layout.nu(), layout.ny()), bias: DVector::zeros(layout.nu()) }
    }

    /// Input at step `t` given the outputs `y[0..t)` (entries from `t` on
    /// are ignored).
    pub fn input_at(&self, t: usize, y: &DVector<f64>) -> DVector<f64> {
        let (m, q) = (self.layout.m, self.layout.q);
        let mut u = self.bias.rows(t * m, m).into_owned();
        if t > 0 {
            let k = self.gain.view((t * m, 0), (m, t * q));
            u += k * y.rows(0, t * q);
        }
        u
    }

    pub fn to_document(&self) -> PolicyDocument {
        PolicyDocument {
            horizon: self.layout.horizon,
            m: self.layout.m,
            q: self.layout.q,
            k: row_major(&self.gain),
            p: self.bias.as_slice().to_vec(),
        }
    }

    pub fn from_document(doc: PolicyDocument) -> Result<Self> {
        let layout = Layout::new(doc.horizon, doc.m, doc.q);
        Self::new(layout, from_row_major(layout.nu(), layout.ny(), doc.k, "K")?, DVector::from_vec(doc.p))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyDocument {
    #[serde(rename = "T")]
    pub horizon: usize,
    pub m: usize,
    pub q: usize,
    #[serde(rename = "K")]
    pub k: Vec<f64>,
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopResponse {
    pub y: DVector<f64>,
    pub u: DVector<f64>,
    /// `col(y, u)`.
    pub eta: DVector<f64>,
}

impl ClosedLoopResponse {
    pub fn new(y: DVector<f64>, u: DVector<f64>) -> Self {
        let eta = vcat(&y, &u);
        Self { y, u, eta }
    }
}

/// Model error of the lifted operators: `Δ = G - Ĝ`, `Θ̃ = Θ - Θ̂`,
/// `ỹ0 = y0 - ŷ0`.
#[derive(Debug, Clone)]
pub struct MismatchRealization {
    pub delta: DMatrix<f64>,
    pub theta_err: DMatrix<f64>,
    pub y0_err: DVector<f64>,
}

impl MismatchRealization {
    pub fn zero(layout: Layout) -> Self {
        Self {
            delta: DMatrix::zeros(layout.ny(), layout.nu()),
            theta_err: DMatrix::zeros(layout.ny(), layout.ny()),
            y0_err: DVector::zeros(layout.ny()),
        }
    }

    /// `(‖Δ‖, ‖Θ̃‖, ‖ỹ0‖)`.
    pub fn norms(&self) -> (f64, f64, f64) {
        (induced_one_norm(&self.delta), induced_one_norm(&self.theta_err), crate::linalg::one_norm(&self.y0_err))
    }
}

/// True iff forbidden blocks of `Φy`/`Φu` are within `tol` of zero and the
/// diagonal blocks of `Φy` are within `tol` of the identity.
pub fn validate_structure(param: &SlsParam, tol: f64) -> Result<bool> {
    let l = param.layout;
    l.yy().check(&param.map_y, "Φy")?;
    l.uy().check(&param.map_u, "Φu")?;
    if l.yy().acausal_max_abs(&param.map_y, false) > tol {
        return Ok(false);
    }
    if l.uy().acausal_max_abs(&param.map_u, true) > tol {
        return Ok(false);
    }
    let q = l.q;
    for t in 0..l.blocks() {
        for i in 0..q {
            for j in 0..q {
                let target = if i == j { 1.0 } else { 0.0 };
                if (param.map_y[(t * q + i, t * q + j)] - target).abs() > tol {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

/// Induced 1-norm of `[I  -G]·[Φy φy; Φu φu] - [I 0]`.
pub fn validate_subspace(g: &DMatrix<f64>, param: &SlsParam) -> Result<f64> {
    let l = param.layout;
    l.yu().check(g, "G")?;
    let ny = l.ny();
    let mut residual = DMatrix::zeros(ny, ny + 1);
    let map_res = &param.map_y - g * &param.map_u - DMatrix::identity(ny, ny);
    residual.view_mut((0, 0), (ny, ny)).copy_from(&map_res);
    let off_res = &param.offset_y - g * &param.offset_u;
    residual.column_mut(ny).copy_from(&off_res);
    Ok(induced_one_norm(&residual))
}

/// Recovers `K = Φu·Φy⁻¹` and `p = φu - K·φy`.
///
/// `K·Φy = Φu` is solved by block back-substitution over the block columns
/// of `Φy`, using only the (near-identity) diagonal blocks as pivots.
pub fn extract_policy(param: &SlsParam) -> Result<AffinePolicy> {
    let l = param.layout;
    let (m, q, nb) = (l.m, l.q, l.blocks());
    let yy = l.yy();
    let mut gain = DMatrix::<f64>::zeros(l.nu(), l.ny());
    for j in (0..nb).rev() {
        let pivot = yy.block(&param.map_y, j, j);
        let lu = pivot.clone().lu();
        if !lu.is_invertible() {
            return Err(Error::Structure(format!("diagonal block {j} of Φy is singular")));
        }
        // rhs = Φu[:, j] - Σ_{k>j} K[:, k]·Φy[k, j]
        let mut rhs = param.map_u.view((0, j * q), (l.nu(), q)).into_owned();
        for k in (j + 1)..nb {
            let phi_kj = param.map_y.view((k * q, j * q), (q, q));
            rhs -= gain.view((0, k * q), (l.nu(), q)) * phi_kj;
        }
        // K[:, j] · pivot = rhs  <=>  pivotᵀ · K[:, j]ᵀ = rhsᵀ
        let col = pivot
            .transpose()
            .lu()
            .solve(&rhs.transpose())
            .ok_or_else(|| Error::Structure(format!("diagonal block {j} of Φy is singular")))?
            .transpose();
        gain.view_mut((0, j * q), (l.nu(), q)).copy_from(&col);
    }
    let uy = BlockShape::new(nb, m, q);
    let scale = 1.0 + crate::linalg::max_abs(&gain);
    let worst = uy.acausal_max_abs(&gain, true);
    if worst > STRUCTURE_TOL * scale {
        return Err(Error::Structure(format!("extracted gain is not strictly causal (forbidden entry {worst:.3e})")));
    }
    uy.zero_acausal(&mut gain, true);
    let bias = &param.offset_u - &gain * &param.offset_y;
    AffinePolicy::new(l, gain, bias)
}

/// Closed-loop maps achieved by `policy` on the plant `G`:
/// `Φy = (I - GK)⁻¹`, `Φu = K·Φy`, `φy = Φy·G·p`, `φu = (I - KG)⁻¹ p`.
pub fn params_from_policy(policy: &AffinePolicy, g: &DMatrix<f64>) -> Result<SlsParam> {
    let l = policy.layout;
    l.yu().check(g, "G")?;
    let (ny, nu) = (l.ny(), l.nu());
    let i_gk = DMatrix::identity(ny, ny) - g * &policy.gain;
    let i_kg = DMatrix::identity(nu, nu) - &policy.gain * g;
    let map_y = solve_unit_lower(&i_gk, &DMatrix::identity(ny, ny));
    let map_u = &policy.gain * &map_y;
    let offset_y = &map_y * (g * &policy.bias);
    let offset_u = solve_unit_lower_vec(&i_kg, &policy.bias);
    SlsParam::new(l, map_y, map_u, offset_y, offset_u)
}

/// `y = Φy (y0 + Θe) + φy`, `u = Φu (y0 + Θe) + φu`.
pub fn response_from_param(
    param: &SlsParam,
    y0: &DVector<f64>,
    theta: &DMatrix<f64>,
    e: &DVector<f64>,
) -> Result<ClosedLoopResponse> {
    let l = param.layout;
    l.check_vec(y0, l.ny(), "y0")?;
    l.check_vec(e, l.ny(), "e")?;
    l.yy().check(theta, "Θ")?;
    let z = y0 + theta * e;
    Ok(ClosedLoopResponse::new(&param.map_y * &z + &param.offset_y, &param.map_u * &z + &param.offset_u))
}

/// Steps the lifted plant `y = G u + y0 + Θ e` forward one block at a time
/// under `u[t] = Σ_{k<t} K[t,k] y[k] + p[t]`.
pub fn response_from_policy(
    policy: &AffinePolicy,
    g: &DMatrix<f64>,
    y0: &DVector<f64>,
    theta: &DMatrix<f64>,
    e: &DVector<f64>,
) -> Result<ClosedLoopResponse> {
    let l = policy.layout;
    l.yu().check(g, "G")?;
    l.yy().check(theta, "Θ")?;
    l.check_vec(y0, l.ny(), "y0")?;
    l.check_vec(e, l.ny(), "e")?;
    let (m, q) = (l.m, l.q);
    let free = y0 + theta * e;
    let mut y = DVector::zeros(l.ny());
    let mut u = DVector::zeros(l.nu());
    for t in 0..l.blocks() {
        let ut = policy.input_at(t, &y);
        u.rows_mut(t * m, m).copy_from(&ut);
        let gu = g.view((t * q, 0), (q, (t + 1) * m)) * u.rows(0, (t + 1) * m);
        let yt = gu + free.rows(t * q, q);
        y.rows_mut(t * q, q).copy_from(&yt);
    }
    Ok(ClosedLoopResponse::new(y, u))
}

/// `R_Φ = (I - Δ·Φ̂u)⁻¹` by forward substitution, after checking
/// `‖Δ·Φ̂u‖ < 1`.
pub fn mismatch_gain(map_u: &DMatrix<f64>, delta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let x = delta * map_u;
    let norm = induced_one_norm(&x);
    if norm >= 1.0 - 1e-9 {
        return Err(Error::Conditioning { norm });
    }
    let n = x.nrows();
    Ok(solve_unit_lower(&(DMatrix::identity(n, n) - x), &DMatrix::identity(n, n)))
}

/// `R_Φ` as the Neumann series `Σ_k (Δ·Φ̂u)^k`. `Δ·Φ̂u` is block strictly
/// lower-triangular, hence nilpotent, so `T + 1` terms are exact.
pub fn mismatch_gain_neumann(map_u: &DMatrix<f64>, delta: &DMatrix<f64>, terms: usize) -> DMatrix<f64> {
    let x = delta * map_u;
    let n = x.nrows();
    let mut sum = DMatrix::identity(n, n);
    let mut power = DMatrix::identity(n, n);
    for _ in 0..terms {
        power = &power * &x;
        sum += &power;
    }
    sum
}

/// Closed-loop parameterization seen by the true plant `G = Ĝ + Δ` when the
/// policy was designed on `Ĝ`: `Φ = Φ̂·R_Φ`, `φ = R_φ·φ̂`; plus the
/// response `η = Φ(y0 + Θe) + φ` with `y0 = ŷ0 + ỹ0`, `Θ = Θ̂ + Θ̃`.
pub fn true_response_under_mismatch(
    nominal: &SlsParam,
    mm: &MismatchRealization,
    y0_hat: &DVector<f64>,
    theta_hat: &DMatrix<f64>,
    e: &DVector<f64>,
) -> Result<(ClosedLoopResponse, SlsParam)> {
    let l = nominal.layout;
    l.yu().check(&mm.delta, "Δ")?;
    l.yy().check(&mm.theta_err, "Θ̃")?;
    l.check_vec(&mm.y0_err, l.ny(), "ỹ0")?;
    let r_phi = mismatch_gain(&nominal.map_u, &mm.delta)?;
    let map_y = &nominal.map_y * &r_phi;
    let map_u = &nominal.map_u * &r_phi;
    let shift = &r_phi * (&mm.delta * &nominal.offset_u);
    let offset_y = &nominal.offset_y + &nominal.map_y * &shift;
    let offset_u = &nominal.offset_u + &nominal.map_u * &shift;
    let true_param = SlsParam::new(l, map_y, map_u, offset_y, offset_u)?;
    let y0 = y0_hat + &mm.y0_err;
    let theta = theta_hat + &mm.theta_err;
    let response = response_from_param(&true_param, &y0, &theta, e)?;
    Ok((response, true_param))
}
