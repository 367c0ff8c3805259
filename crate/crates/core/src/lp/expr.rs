use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

/// Index of a scalar decision variable inside a [`super::Program`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub usize);

/// `Σ coeff·x_var + constant`. Terms may repeat until [`AffineExpr::canonical`]
/// merges them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AffineExpr {
    terms: Vec<(usize, f64)>,
    constant: f64,
}

impl AffineExpr {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self { terms: Vec::new(), constant: c }
    }

    pub fn term(v: Var, coeff: f64) -> Self {
        Self { terms: vec![(v.0, coeff)], constant: 0.0 }
    }

    pub fn terms(&self) -> &[(usize, f64)] {
        &self.terms
    }

    pub fn constant_part(&self) -> f64 {
        self.constant
    }

    /// True when no variable appears with a nonzero coefficient.
    pub fn is_constant(&self) -> bool {
        self.terms.iter().all(|t| t.1 == 0.0)
    }

    pub fn push(&mut self, v: Var, coeff: f64) {
        if coeff != 0.0 {
            self.terms.push((v.0, coeff));
        }
    }

    /// `self += coeff·other`.
    pub fn add_scaled(&mut self, other: &AffineExpr, coeff: f64) {
        if coeff == 0.0 {
            return;
        }
        self.terms.extend(other.terms.iter().map(|&(v, c)| (v, c * coeff)));
        self.constant += coeff * other.constant;
    }

    /// Sorted by variable, duplicates merged, exact zeros dropped.
    pub fn canonical(mut self) -> Self {
        self.terms.sort_by_key(|t| t.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(self.terms.len());
        for (v, c) in self.terms {
            match merged.last_mut() {
                Some(last) if last.0 == v => last.1 += c,
                _ => merged.push((v, c)),
            }
        }
        merged.retain(|t| t.1 != 0.0);
        self.terms = merged;
        self
    }

    pub fn eval(&self, values: &[f64]) -> f64 {
        self.terms.iter().map(|&(v, c)| c * values[v]).sum::<f64>() + self.constant
    }

    /// `Σ coeffs[k]·exprs[k]`, skipping zero coefficients.
    pub fn dot(coeffs: impl IntoIterator<Item = f64>, exprs: &[AffineExpr]) -> Self {
        let mut out = AffineExpr::zero();
        for (c, e) in coeffs.into_iter().zip(exprs) {
            out.add_scaled(e, c);
        }
        out
    }
}

impl From<Var> for AffineExpr {
    fn from(v: Var) -> Self {
        AffineExpr::term(v, 1.0)
    }
}

impl From<f64> for AffineExpr {
    fn from(c: f64) -> Self {
        AffineExpr::constant(c)
    }
}

impl AddAssign<&AffineExpr> for AffineExpr {
    fn add_assign(&mut self, rhs: &AffineExpr) {
        self.add_scaled(rhs, 1.0);
    }
}

impl AddAssign for AffineExpr {
    fn add_assign(&mut self, rhs: AffineExpr) {
        self.terms.extend(rhs.terms);
        self.constant += rhs.constant;
    }
}

impl SubAssign<&AffineExpr> for AffineExpr {
    fn sub_assign(&mut self, rhs: &AffineExpr) {
        self.add_scaled(rhs, -1.0);
    }
}

impl SubAssign for AffineExpr {
    fn sub_assign(&mut self, rhs: AffineExpr) {
        self.add_scaled(&rhs, -1.0);
    }
}

impl AddAssign<f64> for AffineExpr {
    fn add_assign(&mut self, rhs: f64) {
        self.constant += rhs;
    }
}

impl Add for AffineExpr {
    type Output = AffineExpr;
    fn add(mut self, rhs: AffineExpr) -> AffineExpr {
        self += rhs;
        self
    }
}

impl Add<f64> for AffineExpr {
    type Output = AffineExpr;
    fn add(mut self, rhs: f64) -> AffineExpr {
        self.constant += rhs;
        self
    }
}

impl Sub for AffineExpr {
    type Output = AffineExpr;
    fn sub(mut self, rhs: AffineExpr) -> AffineExpr {
        self -= rhs;
        self
    }
}

impl Sub<f64> for AffineExpr {
    type Output = AffineExpr;
    fn sub(mut self, rhs: f64) -> AffineExpr {
        self.constant -= rhs;
        self
    }
}

impl Neg for AffineExpr {
    type Output = AffineExpr;
    fn neg(self) -> AffineExpr {
        self * -1.0
    }
}

impl Mul<f64> for AffineExpr {
    type Output = AffineExpr;
    fn mul(mut self, rhs: f64) -> AffineExpr {
        for t in &mut self.terms {
            t.1 *= rhs;
        }
        self.constant *= rhs;
        self
    }
}

/// Row-major matrix of affine expressions.
#[derive(Debug, Clone, PartialEq)]
pub struct ExprMatrix {
    rows: usize,
    cols: usize,
    data: Vec<AffineExpr>,
}

impl ExprMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![AffineExpr::zero(); rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> AffineExpr) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> &AffineExpr {
        &self.data[r * self.cols + c]
    }

    pub fn get_mut(&mut self, r: usize, c: usize) -> &mut AffineExpr {
        &mut self.data[r * self.cols + c]
    }

    pub fn column(&self, c: usize) -> impl Iterator<Item = &AffineExpr> {
        (0..self.rows).map(move |r| self.get(r, c))
    }

    pub fn iter(&self) -> impl Iterator<Item = &AffineExpr> {
        self.data.iter()
    }

    /// `[self; other]`.
    pub fn vstack(&self, other: &ExprMatrix) -> ExprMatrix {
        assert_eq!(self.cols, other.cols, "vstack column mismatch");
        let mut data = self.data.clone();
        data.extend(other.data.iter().cloned());
        ExprMatrix { rows: self.rows + other.rows, cols: self.cols, data }
    }

    pub fn eval(&self, values: &[f64]) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.rows, self.cols, |r, c| self.get(r, c).eval(values))
    }
}
