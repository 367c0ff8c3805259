//! Small dense helpers shared by the lifted operators and the SLS maps.
//!
//! All matrix norms here are the induced 1-norm (maximum absolute column
//! sum) and all vector norms the 1-norm, which is the norm pair the whole
//! synthesis is stated in.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Maximum absolute column sum. Zero for empty matrices.
pub fn induced_one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

pub fn one_norm(v: &DVector<f64>) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Block partition of a matrix made of `blocks × blocks` tiles of size
/// `row_size × col_size`; tile `(i, j)` corresponds to time indices `(i, j)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShape {
    pub blocks: usize,
    pub row_size: usize,
    pub col_size: usize,
}

impl BlockShape {
    pub fn new(blocks: usize, row_size: usize, col_size: usize) -> Self {
        Self { blocks, row_size, col_size }
    }

    pub fn rows(&self) -> usize {
        self.blocks * self.row_size
    }

    pub fn cols(&self) -> usize {
        self.blocks * self.col_size
    }

    /// Time index of a scalar row.
    pub fn row_block(&self, r: usize) -> usize {
        r / self.row_size
    }

    pub fn col_block(&self, c: usize) -> usize {
        c / self.col_size
    }

    pub fn check(&self, m: &DMatrix<f64>, what: &str) -> Result<()> {
        if m.nrows() != self.rows() || m.ncols() != self.cols() {
            return Err(Error::dim(format!(
                "{what} is {}x{}, expected {}x{}",
                m.nrows(),
                m.ncols(),
                self.rows(),
                self.cols()
            )));
        }
        Ok(())
    }

    pub fn block(&self, m: &DMatrix<f64>, i: usize, j: usize) -> DMatrix<f64> {
        m.view((i * self.row_size, j * self.col_size), (self.row_size, self.col_size)).into_owned()
    }

    /// Largest absolute entry over the blocks above the diagonal (and on it
    /// when `strict`), i.e. over everything a causal map must leave at zero.
    pub fn acausal_max_abs(&self, m: &DMatrix<f64>, strict: bool) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..m.nrows() {
            let bi = self.row_block(r);
            for c in 0..m.ncols() {
                let bj = self.col_block(c);
                if bj > bi || (strict && bj == bi) {
                    worst = worst.max(m[(r, c)].abs());
                }
            }
        }
        worst
    }

    /// Zero every acausal entry in place.
    pub fn zero_acausal(&self, m: &mut DMatrix<f64>, strict: bool) {
        for r in 0..m.nrows() {
            let bi = self.row_block(r);
            for c in 0..m.ncols() {
                let bj = self.col_block(c);
                if bj > bi || (strict && bj == bi) {
                    m[(r, c)] = 0.0;
                }
            }
        }
    }
}

/// Solves `L·X = B` for a lower-triangular `L` whose diagonal is exactly one
/// (the case for `I - G·K`, `I - K·G` and `I - Δ·Φu`). Entries of `L` above
/// the diagonal are ignored.
pub fn solve_unit_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    debug_assert_eq!(l.ncols(), n);
    debug_assert_eq!(b.nrows(), n);
    let mut x = b.clone();
    for col in 0..x.ncols() {
        for i in 0..n {
            let mut acc = x[(i, col)];
            for k in 0..i {
                let lik = l[(i, k)];
                if lik != 0.0 {
                    acc -= lik * x[(k, col)];
                }
            }
            x[(i, col)] = acc;
        }
    }
    x
}

pub fn solve_unit_lower_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let x = solve_unit_lower(l, &DMatrix::from_column_slice(b.len(), 1, b.as_slice()));
    DVector::from_column_slice(x.as_slice())
}

/// Matrix power by repeated multiplication (`k = 0` gives the identity).
pub fn mat_pow(a: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let mut out = DMatrix::identity(a.nrows(), a.ncols());
    for _ in 0..k {
        out = a * out;
    }
    out
}

/// Stacks two vectors `col(a, b)`.
pub fn vcat(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() + b.len());
    out.rows_mut(0, a.len()).copy_from(a);
    out.rows_mut(a.len(), b.len()).copy_from(b);
    out
}

/// Stacks two matrices with equal column count `[a; b]`.
pub fn vstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.ncols(), b.ncols());
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.view_mut((0, 0), (a.nrows(), a.ncols())).copy_from(a);
    out.view_mut((a.nrows(), 0), (b.nrows(), b.ncols())).copy_from(b);
    out
}
