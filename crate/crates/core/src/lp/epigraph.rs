//! Linear epigraph reformulations of the norms used by the synthesis.
//!
//! Each helper introduces auxiliary nonnegative variables and the
//! inequalities tying them to their arguments. Arguments that are constant
//! are folded instead of getting a variable.

use super::{AffineExpr, ExprMatrix, Program, Shape, VarHandle};

/// Returns an expression `t` with `t ≥ |e|` enforced; `|c|` for constants.
pub fn add_abs_epigraph(prog: &mut Program, name: &str, e: &AffineExpr) -> AffineExpr {
    if e.is_constant() {
        return AffineExpr::constant(e.constant_part().abs());
    }
    let t = prog.nonneg_scalar(name);
    prog.add_leq(e.clone(), t.expr());
    prog.add_leq(-e.clone(), t.expr());
    t.expr()
}

/// Entrywise absolute-value bounds of `m`, shaped like `m`.
pub fn add_abs_entries(prog: &mut Program, name: &str, m: &ExprMatrix) -> ExprMatrix {
    ExprMatrix::from_fn(m.nrows(), m.ncols(), |r, c| add_abs_epigraph(prog, name, m.get(r, c)))
}

/// Scalar `t ≥ Σ |e_k|`.
pub fn add_l1_epigraph(prog: &mut Program, name: &str, exprs: &[AffineExpr]) -> VarHandle {
    let mut sum = AffineExpr::zero();
    for e in exprs {
        sum += add_abs_epigraph(prog, name, e);
    }
    let t = prog.nonneg_scalar(name);
    prog.add_leq(sum, t.expr());
    t
}

/// Scalar `t` bounding every column sum of `abs` (entries that already
/// bound absolute values). Stacking several `abs` matrices with
/// [`ExprMatrix::vstack`] before the call bounds the norm of the stack.
pub fn add_column_sum_epigraph(prog: &mut Program, name: &str, abs: &ExprMatrix) -> VarHandle {
    let t = prog.add_variable(name, Shape::Scalar, 0.0, f64::INFINITY);
    for c in 0..abs.ncols() {
        let mut sum = AffineExpr::zero();
        for e in abs.column(c) {
            sum += e;
        }
        prog.add_leq(sum, t.expr());
    }
    t
}

/// Scalar `t ≥ ‖m‖` in the induced 1-norm.
pub fn add_induced1_epigraph(prog: &mut Program, name: &str, m: &ExprMatrix) -> VarHandle {
    let abs = add_abs_entries(prog, &format!("{name}.abs"), m);
    add_column_sum_epigraph(prog, name, &abs)
}

/// `max_k e_k ≤ bound`, written as one inequality per piece.
pub fn add_max_affine_leq(prog: &mut Program, exprs: &[AffineExpr], bound: &AffineExpr) {
    for e in exprs {
        prog.add_leq(e.clone(), bound.clone());
    }
}
