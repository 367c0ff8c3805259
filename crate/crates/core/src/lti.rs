//! Innovation-form plant, its predictor-form Markov parameters and the
//! horizon-lifted operators used by every downstream computation.
//!
//! The plant is
//!
//! ```text
//! x[t+1] = A x[t] + B u[t] + L e[t]
//! y[t]   = C x[t] + D u[t] + e[t]
//! ```
//!
//! Over a prediction window `t = 0..=T` the stacked outputs satisfy
//! `y = G u + y0 + Θ e`, where `y0` is the free response of the state
//! reconstructed from the last `τ` inputs and outputs.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{induced_one_norm, mat_pow, BlockShape};

/// Default acceptance threshold for [`predictor_decay_check`].
pub const DEFAULT_DECAY_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct InnovationModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    /// Kalman (observer) gain, `n × q`.
    pub l: DMatrix<f64>,
}

impl InnovationModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>, l: DMatrix<f64>) -> Result<Self> {
        let model = Self { a, b, c, d, l };
        model.validate()?;
        Ok(model)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn q(&self) -> usize {
        self.c.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        let (m, q) = (self.b.ncols(), self.c.nrows());
        let expect = |name: &str, mat: &DMatrix<f64>, r: usize, c: usize| {
            if mat.nrows() != r || mat.ncols() != c {
                Err(Error::dim(format!("{name} is {}x{}, expected {r}x{c}", mat.nrows(), mat.ncols())))
            } else {
                Ok(())
            }
        };
        expect("A", &self.a, n, n)?;
        expect("B", &self.b, n, m)?;
        expect("C", &self.c, q, n)?;
        expect("D", &self.d, q, m)?;
        expect("L", &self.l, n, q)?;
        if self
            .a
            .iter()
            .chain(self.b.iter())
            .chain(self.c.iter())
            .chain(self.d.iter())
            .chain(self.l.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::invalid("model", "matrix entries must be finite"));
        }
        Ok(())
    }

    /// Predictor matrix `A - L C`.
    pub fn predictor_matrix(&self) -> DMatrix<f64> {
        &self.a - &self.l * &self.c
    }

    /// Predictor input matrix `B - L D`.
    pub fn predictor_input(&self) -> DMatrix<f64> {
        &self.b - &self.l * &self.d
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(s)?;
        doc.into_model()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&ModelDocument::from_model(self)).expect("model serializes")
    }
}

/// Flat on-disk form: dimensions plus row-major matrix arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDocument {
    pub n: usize,
    pub m: usize,
    pub q: usize,
    #[serde(rename = "A")]
    pub a: Vec<f64>,
    #[serde(rename = "B")]
    pub b: Vec<f64>,
    #[serde(rename = "C")]
    pub c: Vec<f64>,
    #[serde(rename = "D", default)]
    pub d: Option<Vec<f64>>,
    #[serde(rename = "L")]
    pub l: Vec<f64>,
}

impl ModelDocument {
    pub fn from_model(model: &InnovationModel) -> Self {
        Self {
            n: model.n(),
            m: model.m(),
            q: model.q(),
            a: row_major(&model.a),
            b: row_major(&model.b),
            c: row_major(&model.c),
            d: Some(row_major(&model.d)),
            l: row_major(&model.l),
        }
    }

    pub fn into_model(self) -> Result<InnovationModel> {
        let (n, m, q) = (self.n, self.m, self.q);
        if n == 0 {
            return Err(Error::invalid("n", "state dimension must be positive"));
        }
        let d = match self.d {
            Some(d) => from_row_major(q, m, d, "D")?,
            None => DMatrix::zeros(q, m),
        };
        InnovationModel::new(
            from_row_major(n, n, self.a, "A")?,
            from_row_major(n, m, self.b, "B")?,
            from_row_major(q, n, self.c, "C")?,
            d,
            from_row_major(n, q, self.l, "L")?,
        )
    }
}

pub fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>, field: &str) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(Error::invalid(
            field,
            format!("expected {} entries ({rows}x{cols}), found {}", rows * cols, data.len()),
        ));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

/// Predictor-form Markov parameters `Ψu[k] = (A-LC)^(k-1)(B-LD)` and
/// `Ψy[k] = (A-LC)^(k-1) L` for `k = 1..=τ` (stored at index `k-1`).
#[derive(Debug, Clone)]
pub struct MarkovBank {
    pub tau: usize,
    pub psi_u: Vec<DMatrix<f64>>,
    pub psi_y: Vec<DMatrix<f64>>,
}

impl MarkovBank {
    /// The row `Ψ = [Ψu_τ … Ψu_1, Ψy_τ … Ψy_1]` acting on `col(u⁻, y⁻)`.
    pub fn stacked(&self) -> DMatrix<f64> {
        let n = self.psi_u[0].nrows();
        let (m, q) = (self.psi_u[0].ncols(), self.psi_y[0].ncols());
        let mut psi = DMatrix::zeros(n, self.tau * (m + q));
        for k in 1..=self.tau {
            let slot = self.tau - k;
            psi.view_mut((0, slot * m), (n, m)).copy_from(&self.psi_u[k - 1]);
            psi.view_mut((0, self.tau * m + slot * q), (n, q)).copy_from(&self.psi_y[k - 1]);
        }
        psi
    }

    /// State estimate `x̂0 = Ψ·col(u⁻, y⁻)`.
    pub fn state_estimate(&self, window: &PastWindow) -> Result<DVector<f64>> {
        let (m, q) = (self.psi_u[0].ncols(), self.psi_y[0].ncols());
        if window.u_minus.len() != self.tau * m || window.y_minus.len() != self.tau * q {
            return Err(Error::dim(format!(
                "past window has {} inputs / {} outputs, bank expects {} / {}",
                window.u_minus.len(),
                window.y_minus.len(),
                self.tau * m,
                self.tau * q
            )));
        }
        let mut x = DVector::zeros(self.psi_u[0].nrows());
        for k in 1..=self.tau {
            let slot = self.tau - k;
            x += &self.psi_u[k - 1] * window.u_minus.rows(slot * m, m);
            x += &self.psi_y[k - 1] * window.y_minus.rows(slot * q, q);
        }
        Ok(x)
    }
}

/// The last `τ` inputs and outputs before `t = 0`, oldest first:
/// `u⁻ = col(u[-τ], …, u[-1])`, `y⁻ = col(y[-τ], …, y[-1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PastWindow {
    pub u_minus: DVector<f64>,
    pub y_minus: DVector<f64>,
}

impl PastWindow {
    pub fn zeros(tau: usize, m: usize, q: usize) -> Self {
        Self { u_minus: DVector::zeros(tau * m), y_minus: DVector::zeros(tau * q) }
    }

    pub fn magnitude(&self) -> f64 {
        self.u_minus.iter().chain(self.y_minus.iter()).fold(0.0, |a, v| a.max(v.abs()))
    }
}

#[derive(Debug, Clone)]
pub struct StackedOperators {
    /// Horizon length; stacked vectors hold `T + 1` blocks.
    pub horizon: usize,
    pub n: usize,
    pub m: usize,
    pub q: usize,
    /// `col(I, A, …, A^T)`.
    pub gamma: DMatrix<f64>,
    pub tu: DMatrix<f64>,
    pub te: DMatrix<f64>,
    pub c_blk: DMatrix<f64>,
    pub d_blk: DMatrix<f64>,
    /// Lifted input-to-output map `C·Tu + D`.
    pub g: DMatrix<f64>,
    /// Lifted innovation-to-output map `C·Te + I`.
    pub theta: DMatrix<f64>,
}

impl StackedOperators {
    pub fn blocks(&self) -> usize {
        self.horizon + 1
    }

    pub fn g_shape(&self) -> BlockShape {
        BlockShape::new(self.blocks(), self.q, self.m)
    }

    pub fn theta_shape(&self) -> BlockShape {
        BlockShape::new(self.blocks(), self.q, self.q)
    }

    /// Predicted outputs `G u + y0 + Θ e`.
    pub fn predict(&self, u: &DVector<f64>, y0: &DVector<f64>, e: &DVector<f64>) -> DVector<f64> {
        &self.g * u + y0 + &self.theta * e
    }
}

pub fn predictor_markov_params(model: &InnovationModel, tau: usize) -> Result<MarkovBank> {
    model.validate()?;
    if tau == 0 {
        return Err(Error::invalid("tau", "past horizon must be at least 1"));
    }
    let a_bar = model.predictor_matrix();
    let mut psi_u = Vec::with_capacity(tau);
    let mut psi_y = Vec::with_capacity(tau);
    let mut u_k = model.predictor_input();
    let mut y_k = model.l.clone();
    for _ in 0..tau {
        let next_u = &a_bar * &u_k;
        let next_y = &a_bar * &y_k;
        psi_u.push(std::mem::replace(&mut u_k, next_u));
        psi_y.push(std::mem::replace(&mut y_k, next_y));
    }
    Ok(MarkovBank { tau, psi_u, psi_y })
}

pub fn stacked_operators(model: &InnovationModel, horizon: usize) -> Result<StackedOperators> {
    model.validate()?;
    if horizon == 0 {
        return Err(Error::invalid("T", "horizon must be at least 1"));
    }
    let (n, m, q) = (model.n(), model.m(), model.q());
    let nb = horizon + 1;

    // A^0 … A^T by repeated multiplication.
    let mut powers = Vec::with_capacity(nb);
    powers.push(DMatrix::identity(n, n));
    for k in 1..nb {
        let next = &model.a * &powers[k - 1];
        powers.push(next);
    }

    let mut gamma = DMatrix::zeros(nb * n, n);
    for (t, p) in powers.iter().enumerate() {
        gamma.view_mut((t * n, 0), (n, n)).copy_from(p);
    }

    let mut tu = DMatrix::zeros(nb * n, nb * m);
    let mut te = DMatrix::zeros(nb * n, nb * q);
    for i in 1..nb {
        for j in 0..i {
            let p = &powers[i - j - 1];
            tu.view_mut((i * n, j * m), (n, m)).copy_from(&(p * &model.b));
            te.view_mut((i * n, j * q), (n, q)).copy_from(&(p * &model.l));
        }
    }

    let mut c_blk = DMatrix::zeros(nb * q, nb * n);
    let mut d_blk = DMatrix::zeros(nb * q, nb * m);
    for t in 0..nb {
        c_blk.view_mut((t * q, t * n), (q, n)).copy_from(&model.c);
        d_blk.view_mut((t * q, t * m), (q, m)).copy_from(&model.d);
    }

    let g = &c_blk * &tu + &d_blk;
    let theta = &c_blk * &te + DMatrix::identity(nb * q, nb * q);
    Ok(StackedOperators { horizon, n, m, q, gamma, tu, te, c_blk, d_blk, g, theta })
}

/// `y0 = C·Γ·Ψ·col(u⁻, y⁻)`; the `(A-LC)^τ x[-τ]` remainder is dropped.
pub fn free_response_offset(ops: &StackedOperators, bank: &MarkovBank, window: &PastWindow) -> Result<DVector<f64>> {
    if bank.psi_u[0].nrows() != ops.n || bank.psi_u[0].ncols() != ops.m || bank.psi_y[0].ncols() != ops.q {
        return Err(Error::dim("Markov bank and stacked operators disagree on (n, m, q)"));
    }
    let x0 = bank.state_estimate(window)?;
    Ok(&ops.c_blk * (&ops.gamma * x0))
}

/// Induced 1-norm of `(A-LC)^τ`, the factor multiplying the state the
/// past window cannot explain.
pub fn predictor_decay_check(model: &InnovationModel, tau: usize) -> f64 {
    induced_one_norm(&mat_pow(&model.predictor_matrix(), tau))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_one() -> InnovationModel {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        InnovationModel::new(s(0.5), s(1.0), s(1.0), s(0.0), s(0.25)).unwrap()
    }

    #[test]
    fn scalar_markov_bank() {
        let bank = predictor_markov_params(&scalar_one(), 2).unwrap();
        let u: Vec<f64> = bank.psi_u.iter().map(|m| m[(0, 0)]).collect();
        let y: Vec<f64> = bank.psi_y.iter().map(|m| m[(0, 0)]).collect();
        assert_eq!(u, vec![1.0, 0.25]);
        assert_eq!(y, vec![0.25, 0.0625]);
    }

    #[test]
    fn tau_one_is_base_case() {
        let m = scalar_one();
        let bank = predictor_markov_params(&m, 1).unwrap();
        assert_eq!(bank.psi_u, vec![m.predictor_input()]);
        assert_eq!(bank.psi_y, vec![m.l.clone()]);
        assert!(predictor_markov_params(&m, 0).is_err());
    }

    #[test]
    fn scalar_stacked_operators() {
        let ops = stacked_operators(&scalar_one(), 1).unwrap();
        assert_eq!(ops.g, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]));
        assert_eq!(ops.theta, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.25, 1.0]));
        assert_eq!(ops.gamma, DMatrix::from_row_slice(2, 1, &[1.0, 0.5]));
    }

    #[test]
    fn zero_input_matrices_give_zero_g() {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        let m = InnovationModel::new(s(0.9), s(0.0), s(1.0), s(0.0), s(0.3)).unwrap();
        let ops = stacked_operators(&m, 4).unwrap();
        assert_eq!(ops.g.abs().max(), 0.0);
    }

    #[test]
    fn scalar_free_response() {
        let m = scalar_one();
        let ops = stacked_operators(&m, 1).unwrap();
        let bank = predictor_markov_params(&m, 2).unwrap();
        let w = PastWindow { u_minus: DVector::from_vec(vec![0.0, 1.0]), y_minus: DVector::from_vec(vec![0.0, 0.0]) };
        let y0 = free_response_offset(&ops, &bank, &w).unwrap();
        assert_eq!(y0.as_slice(), &[1.0, 0.5]);
        let zero = free_response_offset(&ops, &bank, &PastWindow::zeros(2, 1, 1)).unwrap();
        assert_eq!(zero.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn window_length_mismatch_is_rejected() {
        let m = scalar_one();
        let ops = stacked_operators(&m, 1).unwrap();
        let bank = predictor_markov_params(&m, 2).unwrap();
        assert!(matches!(free_response_offset(&ops, &bank, &PastWindow::zeros(3, 1, 1)), Err(Error::Dimension(_))));
    }

    #[test]
    fn decay_check_values() {
        assert_eq!(predictor_decay_check(&scalar_one(), 2), 0.0625);
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        // A - LC = 0.5 - 0.5 = 0: deadbeat predictor.
        let deadbeat = InnovationModel::new(s(0.5), s(1.0), s(1.0), s(0.0), s(0.5)).unwrap();
        assert_eq!(predictor_decay_check(&deadbeat, 1), 0.0);
    }

    #[test]
    fn inconsistent_dimensions_are_rejected() {
        let r = InnovationModel::new(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(3, 1),
            DMatrix::zeros(1, 2),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(2, 1),
        );
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn model_document_round_trip() {
        let m = InnovationModel::new(
            DMatrix::from_row_slice(2, 2, &[0.7326, -0.0861, 0.1722, 0.9909]),
            DMatrix::from_row_slice(2, 1, &[0.0609, 0.0]),
            DMatrix::from_row_slice(1, 2, &[0.0, 1.4142]),
            DMatrix::zeros(1, 1),
            DMatrix::from_row_slice(2, 1, &[0.1, 0.1 + 1e-15]),
        )
        .unwrap();
        let back = InnovationModel::from_json_str(&m.to_json_string()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn model_document_rejects_short_arrays() {
        let doc = r#"{"n":2,"m":1,"q":1,"A":[1,0,0],"B":[0,1],"C":[1,0],"L":[0,0]}"#;
        assert!(matches!(InnovationModel::from_json_str(doc), Err(Error::Validation { .. })));
    }
}
