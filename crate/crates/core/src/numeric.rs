//! Dense numerical helpers shared across modules: rank decisions, spectra,
//! norms, pseudoinverse/nullspace, a pivoted solver with condition
//! estimation, and compensated (double-double) arithmetic used for
//! residual evaluation.

use nalgebra::{DMatrix, DVector, SymmetricEigen, LU};

use crate::error::{Error, Result};

/// Relative singular-value threshold used by every rank decision:
/// `sigma_max * max(rows, cols) * RANK_EPS_SCALE * f64::EPSILON`.
pub const RANK_EPS_SCALE: f64 = 1.0;

const SCHUR_MAX_ITER: usize = 10_000;

/// Absolute tolerance below which a singular value counts as zero.
pub fn rank_tolerance(m: &DMatrix<f64>, sigma_max: f64) -> f64 {
    sigma_max * (m.nrows().max(m.ncols()) as f64) * RANK_EPS_SCALE * f64::EPSILON
}

pub fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    if m.is_empty() {
        return DVector::zeros(0);
    }
    m.singular_values()
}

/// Numerical rank with the shared relative threshold.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = singular_values(m);
    let smax = sv.max();
    if sv.is_empty() || smax == 0.0 {
        return 0;
    }
    let tol = rank_tolerance(m, smax);
    sv.iter().filter(|&&s| s > tol).count()
}

/// Numerical rank against an explicit absolute threshold.
pub fn rank_above(m: &DMatrix<f64>, tol: f64) -> usize {
    singular_values(m).iter().filter(|&&s| s > tol).count()
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    let sv = singular_values(m);
    if sv.is_empty() {
        0.0
    } else {
        sv.max()
    }
}

/// Largest eigenvalue magnitude of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::invalid(format!(
            "spectral radius needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.is_empty() {
        return Ok(0.0);
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix has non-finite entries".into()));
    }
    let schur = m
        .clone()
        .try_schur(f64::EPSILON, SCHUR_MAX_ITER)
        .ok_or_else(|| Error::Numerical("eigenvalue iteration did not converge".into()))?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(m).first().copied().unwrap_or(f64::NAN)
}

/// Relative asymmetry `max|M - M^T| / max(1, max|M|)`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() / scale
}

/// Moore-Penrose pseudoinverse with the shared rank threshold.
pub fn pseudoinverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.is_empty() {
        return Ok(DMatrix::zeros(m.ncols(), m.nrows()));
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = rank_tolerance(m, smax).max(f64::MIN_POSITIVE);
    svd.pseudo_inverse(tol)
        .map_err(|e| Error::Numerical(format!("pseudoinverse failed: {e}")))
}

/// Orthonormal basis (as columns) of the right nullspace of `m`.
pub fn null_space(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return DMatrix::identity(m.ncols(), m.ncols());
    }
    let smax = singular_values(m).max();
    null_space_above(m, rank_tolerance(m, smax))
}

/// Nullspace basis treating singular values `<= tol` as zero.
///
/// The complement of the numerical row space is extracted from the
/// projector `I - V_r V_r^T`, whose eigenvalues are exactly 0 or 1.
pub fn null_space_above(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let cols = m.ncols();
    if m.nrows() == 0 || cols == 0 {
        return DMatrix::identity(cols, cols);
    }
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let dim = cols - rank;
    if dim == 0 {
        return DMatrix::zeros(cols, 0);
    }
    let mut proj = DMatrix::<f64>::identity(cols, cols);
    for (i, s) in svd.singular_values.iter().enumerate() {
        if *s > tol {
            let v = v_t.row(i).transpose();
            proj -= &v * v.transpose();
        }
    }
    let eig = SymmetricEigen::new(symmetrize(&proj));
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut basis = DMatrix::zeros(cols, dim);
    for (j, &idx) in order.iter().take(dim).enumerate() {
        basis.set_column(j, &eig.eigenvectors.column(idx));
    }
    basis
}

/// Orthonormal basis of the column space, keeping singular values `> tol`.
pub fn range_basis(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    if m.ncols() == 0 || m.nrows() == 0 {
        return DMatrix::zeros(m.nrows(), 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > tol)
        .collect();
    u.select_columns(&keep)
}

/// Partial-pivoting LU of a square matrix together with an estimate of its
/// 1-norm condition number.
pub struct PivotedSolver {
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    l: DMatrix<f64>,
    u: DMatrix<f64>,
    condition: f64,
}

impl PivotedSolver {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::invalid("pivoted solver needs a square matrix"));
        }
        let norm1 = one_norm(a);
        let lu = a.clone().lu();
        let l = lu.l();
        let u = lu.u();
        let mut solver = PivotedSolver {
            lu,
            l,
            u,
            condition: f64::INFINITY,
        };
        let singular = solver.u.diagonal().iter().any(|d| *d == 0.0 || !d.is_finite());
        if !singular && norm1 > 0.0 {
            solver.condition = norm1 * solver.inverse_one_norm_estimate();
        }
        Ok(solver)
    }

    pub fn condition_estimate(&self) -> f64 {
        self.condition
    }

    pub fn solve(&self, b: &DVector<f64>) -> Option<DVector<f64>> {
        let x = self.lu.solve(b)?;
        x.iter().all(|v| v.is_finite()).then_some(x)
    }

    /// Solves `A^T x = b` with the factors of `A`.
    pub fn solve_transpose(&self, b: &DVector<f64>) -> Option<DVector<f64>> {
        let w = self.u.tr_solve_upper_triangular(b)?;
        let mut v = self.l.tr_solve_lower_triangular(&w)?;
        self.lu.p().inv_permute_rows(&mut v);
        Some(v)
    }

    /// Hager/Higham estimate of `||A^{-1}||_1`.
    fn inverse_one_norm_estimate(&self) -> f64 {
        let n = self.u.nrows();
        let mut x = DVector::from_element(n, 1.0 / n as f64);
        let mut estimate = 0.0;
        for _ in 0..5 {
            let Some(y) = self.solve(&x) else {
                return f64::INFINITY;
            };
            let y_norm = y.lp_norm(1);
            if y_norm <= estimate {
                break;
            }
            estimate = y_norm;
            let xi = y.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
            let Some(z) = self.solve_transpose(&xi) else {
                return f64::INFINITY;
            };
            let j = z.iamax();
            if z[j].abs() <= z.dot(&x) {
                break;
            }
            x = DVector::zeros(n);
            x[j] = 1.0;
        }
        // Higham's alternating-sign vector guards against the estimator being
        // fooled by cancellation.
        let alt = DVector::from_fn(n, |i, _| {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            sign * (1.0 + i as f64 / (n.max(2) - 1) as f64)
        });
        if let Some(y) = self.solve(&alt) {
            estimate = f64::max(estimate, 2.0 * y.lp_norm(1) / (3.0 * n as f64));
        }
        estimate
    }
}

/// Row-major nested vectors, for serialization.
pub fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter().map(|c| c.lp_norm(1)).fold(0.0, f64::max)
}

/// Unevaluated sum `hi + lo` carrying roughly 106 bits of precision.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DoubleDouble {
    pub hi: f64,
    pub lo: f64,
}

impl DoubleDouble {
    pub const ZERO: DoubleDouble = DoubleDouble { hi: 0.0, lo: 0.0 };

    pub fn from_f64(v: f64) -> Self {
        DoubleDouble { hi: v, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn two_sum(a: f64, b: f64) -> (f64, f64) {
        let s = a + b;
        let bb = s - a;
        (s, (a - (s - bb)) + (b - bb))
    }

    fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
        let s = a + b;
        (s, b - (s - a))
    }

    fn two_prod(a: f64, b: f64) -> (f64, f64) {
        let p = a * b;
        (p, a.mul_add(b, -p))
    }

    pub fn add(self, o: DoubleDouble) -> Self {
        let (s, e) = Self::two_sum(self.hi, o.hi);
        let (t, f) = Self::two_sum(self.lo, o.lo);
        let (s, e) = Self::quick_two_sum(s, e + t);
        let (hi, lo) = Self::quick_two_sum(s, e + f);
        DoubleDouble { hi, lo }
    }

    pub fn neg(self) -> Self {
        DoubleDouble {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    pub fn sub(self, o: DoubleDouble) -> Self {
        self.add(o.neg())
    }

    pub fn mul(self, o: DoubleDouble) -> Self {
        let (p, e) = Self::two_prod(self.hi, o.hi);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        let (hi, lo) = Self::quick_two_sum(p, e);
        DoubleDouble { hi, lo }
    }

    pub fn mul_f64(self, b: f64) -> Self {
        self.mul(DoubleDouble::from_f64(b))
    }
}

/// `v^T M v` accumulated in double-double for a double-double vector `v`.
pub fn quadratic_form_dd(m: &DMatrix<f64>, v: &[DoubleDouble]) -> DoubleDouble {
    let d = v.len();
    let mut acc = DoubleDouble::ZERO;
    for i in 0..d {
        let mut row = DoubleDouble::ZERO;
        for j in 0..d {
            let mij = m[(i, j)];
            if mij != 0.0 {
                row = row.add(v[j].mul_f64(mij));
            }
        }
        acc = acc.add(v[i].mul(row));
    }
    acc
}
