//! Free-format MPS export and import, for inspecting programs with external
//! solvers. Numbers are written in shortest round-trip form so a program
//! read back is bit-identical.

use std::collections::HashMap;
use std::fmt::Write as _;

use super::{AffineExpr, Program, Shape, Var};
use crate::error::{Error, Result};

const OBJ: &str = "obj";

fn col_name(i: usize) -> String {
    format!("x{i}")
}

pub fn write_mps(prog: &Program, name: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "NAME {name}");
    let _ = writeln!(out, "ROWS");
    let _ = writeln!(out, " N {OBJ}");
    for i in 0..prog.equalities().len() {
        let _ = writeln!(out, " E e{i}");
    }
    for i in 0..prog.inequalities().len() {
        let _ = writeln!(out, " L l{i}");
    }

    let mut by_col: Vec<Vec<(String, f64)>> = vec![Vec::new(); prog.num_vars()];
    for &(v, c) in prog.objective().terms() {
        by_col[v].push((OBJ.to_string(), c));
    }
    for (i, e) in prog.equalities().iter().enumerate() {
        for &(v, c) in e.terms() {
            by_col[v].push((format!("e{i}"), c));
        }
    }
    for (i, e) in prog.inequalities().iter().enumerate() {
        for &(v, c) in e.terms() {
            by_col[v].push((format!("l{i}"), c));
        }
    }
    let _ = writeln!(out, "COLUMNS");
    for (v, entries) in by_col.iter().enumerate() {
        for (row, c) in entries {
            let _ = writeln!(out, " {} {row} {c:?}", col_name(v));
        }
    }

    let _ = writeln!(out, "RHS");
    // The objective's RHS entry is the negated constant offset.
    let offset = prog.objective().constant_part();
    if offset != 0.0 {
        let _ = writeln!(out, " rhs {OBJ} {:?}", -offset);
    }
    for (i, e) in prog.equalities().iter().enumerate() {
        if e.constant_part() != 0.0 {
            let _ = writeln!(out, " rhs e{i} {:?}", -e.constant_part());
        }
    }
    for (i, e) in prog.inequalities().iter().enumerate() {
        if e.constant_part() != 0.0 {
            let _ = writeln!(out, " rhs l{i} {:?}", -e.constant_part());
        }
    }

    let _ = writeln!(out, "BOUNDS");
    for v in 0..prog.num_vars() {
        let (lo, hi) = prog.bounds(Var(v));
        let n = col_name(v);
        match (lo.is_finite(), hi.is_finite()) {
            (true, true) if lo == hi => {
                let _ = writeln!(out, " FX bnd {n} {lo:?}");
            }
            (false, false) => {
                let _ = writeln!(out, " FR bnd {n}");
            }
            (lf, hf) => {
                if !lf {
                    let _ = writeln!(out, " MI bnd {n}");
                } else if lo != 0.0 {
                    let _ = writeln!(out, " LO bnd {n} {lo:?}");
                }
                if hf {
                    let _ = writeln!(out, " UP bnd {n} {hi:?}");
                }
            }
        }
    }
    let _ = writeln!(out, "ENDATA");
    out
}

#[derive(Clone, Copy, PartialEq)]
enum RowKind {
    Obj,
    Eq,
    Le,
    Ge,
}

/// Reads free MPS with `N`, `E`, `L` and `G` rows. Columns become scalar
/// variables in order of first appearance; `G` rows are negated into `≤`.
pub fn read_mps(text: &str) -> Result<Program> {
    let mut section = "";
    let mut rows: Vec<(String, RowKind)> = Vec::new();
    let mut row_index: HashMap<String, usize> = HashMap::new();
    let mut cols: Vec<String> = Vec::new();
    let mut col_index: HashMap<String, usize> = HashMap::new();
    let mut coeffs: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    let mut bounds: Vec<(f64, f64)> = Vec::new();

    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Parse(format!("bad number `{s}`")));

    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('*') {
            continue;
        }
        let tok: Vec<&str> = trimmed.split_whitespace().collect();
        if !line.starts_with(' ') && !line.starts_with('\t') {
            section = tok[0];
            if section == "ENDATA" {
                break;
            }
            continue;
        }
        let bad = || Error::Parse(format!("line {}: unexpected `{trimmed}`", lineno + 1));
        match section {
            "ROWS" => {
                let [kind, name] = tok[..] else { return Err(bad()) };
                let kind = match kind {
                    "N" => RowKind::Obj,
                    "E" => RowKind::Eq,
                    "L" => RowKind::Le,
                    "G" => RowKind::Ge,
                    _ => return Err(bad()),
                };
                row_index.insert(name.to_string(), rows.len());
                rows.push((name.to_string(), kind));
                coeffs.push(Vec::new());
                rhs.push(0.0);
            }
            "COLUMNS" => {
                if tok.len() < 3 || tok.len().is_multiple_of(2) {
                    return Err(bad());
                }
                let col = *col_index.entry(tok[0].to_string()).or_insert_with(|| {
                    cols.push(tok[0].to_string());
                    bounds.push((0.0, f64::INFINITY));
                    cols.len() - 1
                });
                for pair in tok[1..].chunks(2) {
                    let r = *row_index.get(pair[0]).ok_or_else(bad)?;
                    coeffs[r].push((col, num(pair[1])?));
                }
            }
            "RHS" => {
                if tok.len() < 3 || tok.len().is_multiple_of(2) {
                    return Err(bad());
                }
                for pair in tok[1..].chunks(2) {
                    let r = *row_index.get(pair[0]).ok_or_else(bad)?;
                    rhs[r] = num(pair[1])?;
                }
            }
            "BOUNDS" => {
                if tok.len() < 3 {
                    return Err(bad());
                }
                let c = *col_index.get(tok[2]).ok_or_else(bad)?;
                let value = if tok.len() > 3 { Some(num(tok[3])?) } else { None };
                let b = &mut bounds[c];
                match (tok[0], value) {
                    ("FR", _) => *b = (f64::NEG_INFINITY, f64::INFINITY),
                    ("MI", _) => b.0 = f64::NEG_INFINITY,
                    ("PL", _) => b.1 = f64::INFINITY,
                    ("LO", Some(v)) => b.0 = v,
                    ("UP", Some(v)) => b.1 = v,
                    ("FX", Some(v)) => *b = (v, v),
                    _ => return Err(bad()),
                }
            }
            _ => return Err(bad()),
        }
    }

    let mut prog = Program::new();
    let vars: Vec<Var> = cols
        .iter()
        .zip(&bounds)
        .map(|(name, &(lo, hi))| prog.add_variable(name, Shape::Scalar, lo, hi).var())
        .collect();
    let mut objective_seen = false;
    for (r, (_, kind)) in rows.iter().enumerate() {
        let mut e = AffineExpr::zero();
        for &(c, a) in &coeffs[r] {
            e.push(vars[c], a);
        }
        match kind {
            RowKind::Obj if !objective_seen => {
                objective_seen = true;
                prog.set_objective(e - rhs[r]);
            }
            RowKind::Obj => {}
            RowKind::Eq => prog.add_eq(e - rhs[r]),
            RowKind::Le => prog.add_le(e - rhs[r]),
            RowKind::Ge => prog.add_le(-(e - rhs[r])),
        }
    }
    Ok(prog)
}
