//! Symmetric-matrix vectorization and quadratic-monomial lifting.
//!
//! Both use the row-major upper-triangle order `(1,1), (1,2), ..., (1,d),
//! (2,2), ..., (d,d)`. The factor 2 on cross terms lives in
//! [`quad_monomials`], so that `quad_monomials(x) . vec_sym(P) = x^T P x`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;

/// `d (d + 1) / 2`.
pub const fn sym_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Inverse of [`sym_len`], if `len` is a triangular number.
pub fn sym_dim(len: usize) -> Option<usize> {
    let d = (((8 * len + 1) as f64).sqrt() as usize).saturating_sub(1) / 2;
    (d.saturating_sub(1)..=d + 1).find(|&c| sym_len(c) == len)
}

/// The distinct entries of a symmetric `d x d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymVec {
    entries: DVector<f64>,
    dim: usize,
}

impl SymVec {
    pub fn new(entries: DVector<f64>) -> Result<Self> {
        let dim = sym_dim(entries.len()).ok_or_else(|| {
            Error::invalid(format!("length {} is not a triangular number", entries.len()))
        })?;
        Ok(SymVec { entries, dim })
    }

    pub fn entries(&self) -> &DVector<f64> {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn into_entries(self) -> DVector<f64> {
        self.entries
    }
}

pub fn vec_sym(p: &DMatrix<f64>) -> Result<SymVec> {
    if !p.is_square() {
        return Err(Error::invalid("vec_sym needs a square matrix"));
    }
    let d = p.nrows();
    let scale = p.amax().max(f64::MIN_POSITIVE);
    for i in 0..d {
        for j in (i + 1)..d {
            if (p[(i, j)] - p[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::invalid(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let mut out = Vec::with_capacity(sym_len(d));
    for i in 0..d {
        for j in i..d {
            out.push(p[(i, j)]);
        }
    }
    Ok(SymVec {
        entries: DVector::from_vec(out),
        dim: d,
    })
}

pub fn unvec_sym(v: &SymVec) -> DMatrix<f64> {
    unvec_entries(v.entries.as_slice(), v.dim)
}

/// Rebuilds a symmetric matrix from raw upper-triangle entries.
pub fn unvec_slice(entries: &[f64]) -> Result<DMatrix<f64>> {
    let d = sym_dim(entries.len()).ok_or_else(|| {
        Error::invalid(format!("length {} is not a triangular number", entries.len()))
    })?;
    Ok(unvec_entries(entries, d))
}

fn unvec_entries(entries: &[f64], d: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        for j in i..d {
            p[(i, j)] = entries[k];
            p[(j, i)] = entries[k];
            k += 1;
        }
    }
    p
}

/// `[x1^2, 2 x1 x2, ..., 2 x1 xd, x2^2, 2 x2 x3, ..., xd^2]`.
pub fn quad_monomials(x: &DVector<f64>) -> DVector<f64> {
    let d = x.len();
    let mut out = DVector::zeros(sym_len(d));
    write_quad_monomials(x.as_slice(), out.as_mut_slice());
    out
}

pub(crate) fn write_quad_monomials(x: &[f64], out: &mut [f64]) {
    let d = x.len();
    let mut k = 0;
    for i in 0..d {
        out[k] = x[i] * x[i];
        k += 1;
        for j in (i + 1)..d {
            out[k] = 2.0 * x[i] * x[j];
            k += 1;
        }
    }
}

/// Block Hankel matrix with `depth` block rows built from the columns of
/// `seq` (d x N). Block `(i, j)` is `seq[i + j]`.
pub fn hankel(seq: &DMatrix<f64>, depth: usize) -> Result<DMatrix<f64>> {
    let (d, n) = seq.shape();
    if depth == 0 || depth > n {
        return Err(Error::invalid(format!(
            "Hankel depth {depth} must lie in 1..={n}"
        )));
    }
    let cols = n - depth + 1;
    let mut h = DMatrix::zeros(d * depth, cols);
    for i in 0..depth {
        h.view_mut((i * d, 0), (d, cols))
            .copy_from(&seq.columns(i, cols));
    }
    Ok(h)
}
