//! Model-based ground truth: Riccati and Lyapunov solutions and Hewer's
//! policy iteration. The learner never calls into this module.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numeric::{self, PivotedSolver};
use crate::qlearn::{policy_improvement, Gain, QTheta};
use crate::systems::LinearSystem;

pub const DARE_TOL: f64 = 1e-12;
pub const DARE_MAX_ITER: usize = 1_000_000;

/// Recursion steps allowed without halving the best relative change.
const STAGNATION_WINDOW: usize = 20_000;

/// Stage cost weights `Q`, `R` and the block diagonal `diag(Q, R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    qbar: DMatrix<f64>,
}

impl CostWeights {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        for (name, w) in [("Q", &q), ("R", &r)] {
            if !w.is_square() || w.nrows() == 0 {
                return Err(Error::invalid(format!("{name} must be square and non-empty")));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("{name} has non-finite entries")));
            }
            if numeric::asymmetry(w) > 1e-10 * (1.0 + w.amax()) {
                return Err(Error::invalid(format!("{name} is not symmetric")));
            }
            if numeric::min_eigenvalue(w) <= 0.0 {
                return Err(Error::invalid(format!("{name} is not positive definite")));
            }
        }
        let (n, m) = (q.nrows(), r.nrows());
        let mut qbar = DMatrix::zeros(n + m, n + m);
        qbar.view_mut((0, 0), (n, n)).copy_from(&q);
        qbar.view_mut((n, n), (m, m)).copy_from(&r);
        Ok(CostWeights { q, r, qbar })
    }

    pub fn identity(n: usize, m: usize) -> Self {
        CostWeights::new(DMatrix::identity(n, n), DMatrix::identity(m, m))
            .expect("identity weights are valid")
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn qbar(&self) -> &DMatrix<f64> {
        &self.qbar
    }

    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    pub fn m(&self) -> usize {
        self.r.nrows()
    }

    /// `c * Q`, `c * R` for `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::invalid("weight scale must be positive"));
        }
        CostWeights::new(&self.q * c, &self.r * c)
    }

    fn check_against(&self, sys: &LinearSystem) -> Result<()> {
        if self.n() != sys.n() || self.m() != sys.m() {
            return Err(Error::invalid(format!(
                "weights are for n={}, m={} but the system has n={}, m={}",
                self.n(),
                self.m(),
                sys.n(),
                sys.m()
            )));
        }
        Ok(())
    }
}

/// `Phi = [[A, B], [-K A, -K B]] = Kbar S`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiMatrix {
    matrix: DMatrix<f64>,
    kbar: DMatrix<f64>,
    s: DMatrix<f64>,
}

impl PhiMatrix {
    pub fn new(sys: &LinearSystem, k: &Gain) -> Result<Self> {
        if k.m() != sys.m() || k.n() != sys.n() {
            return Err(Error::invalid("gain dimensions do not match the system"));
        }
        let kbar = kbar(k);
        let s = sys.stacked();
        let matrix = &kbar * &s;
        Ok(PhiMatrix { matrix, kbar, s })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn kbar(&self) -> &DMatrix<f64> {
        &self.kbar
    }

    pub fn s(&self) -> &DMatrix<f64> {
        &self.s
    }
}

/// `[I; -K]`.
pub fn kbar(k: &Gain) -> DMatrix<f64> {
    let (m, n) = (k.m(), k.n());
    let mut out = DMatrix::zeros(n + m, n);
    out.view_mut((0, 0), (n, n)).fill_with_identity();
    out.view_mut((n, 0), (m, n)).copy_from(&(-k.matrix()));
    out
}

/// Frobenius norm of `Q + A'PA - A'PB (R + B'PB)^{-1} B'PA - P`.
pub fn dare_residual(sys: &LinearSystem, w: &CostWeights, p: &DMatrix<f64>) -> Result<f64> {
    Ok((riccati_map(sys, w, p)? - p).norm())
}

fn riccati_map(sys: &LinearSystem, w: &CostWeights, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (a, b) = (sys.a(), sys.b());
    let pa = p * a;
    let pb = p * b;
    let gram = w.r() + b.transpose() * &pb;
    let k = gram
        .cholesky()
        .ok_or_else(|| Error::Numerical("R + B'PB is not positive definite".into()))?
        .solve(&(b.transpose() * &pa));
    let next = w.q() + a.transpose() * &pa - (a.transpose() * &pb) * k;
    Ok(numeric::symmetrize(&next))
}

/// Solves the DARE by Riccati recursion from `P = Q`. Once the recursion
/// has settled onto a stabilizing gain it is finished off with Newton
/// (Hewer) steps, which converge quadratically where the plain recursion
/// crawls. Convergence is judged relative to `max(1, ||P||)`.
///
/// For strongly unstable plants the recursion's transient grows like
/// `rho(A)^{2k}` and cancellation destroys definiteness; the structured
/// doubling algorithm then takes over.
pub fn solve_dare(sys: &LinearSystem, w: &CostWeights, tol: f64, max_iter: usize) -> Result<DMatrix<f64>> {
    w.check_against(sys)?;
    if !(tol > 0.0) {
        return Err(Error::invalid("DARE tolerance must be positive"));
    }
    match riccati_recursion(sys, w, tol, max_iter) {
        Ok(p) => Ok(p),
        Err(Error::Numerical(reason)) => {
            log::debug!("Riccati recursion failed ({reason}); switching to doubling");
            let p = structured_doubling(sys, w, tol)?;
            newton_polish(sys, w, &p, tol)
                .ok_or_else(|| Error::Numerical("doubling result could not be polished".into()))
        }
        Err(e) => Err(e),
    }
}

fn riccati_recursion(sys: &LinearSystem, w: &CostWeights, tol: f64, max_iter: usize) -> Result<DMatrix<f64>> {
    let scale = |p: &DMatrix<f64>| p.norm().max(1.0);
    let mut p = w.q().clone();
    let (mut best_delta, mut best_iter) = (f64::INFINITY, 0);
    for iter in 0..max_iter {
        let next = riccati_map(sys, w, &p)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("Riccati recursion diverged".into()));
        }
        let delta = (&next - &p).norm() / scale(&next);
        p = next;
        if delta <= tol {
            return Ok(p);
        }
        if delta < 0.5 * best_delta {
            (best_delta, best_iter) = (delta, iter);
        } else if iter - best_iter > STAGNATION_WINDOW {
            return Err(Error::Numerical(format!(
                "Riccati recursion stagnated at relative change {best_delta:.3e}"
            )));
        }
        if delta <= 1e-6 && iter % 16 == 0 {
            if let Some(polished) = newton_polish(sys, w, &p, tol) {
                return Ok(polished);
            }
        }
    }
    Err(Error::Numerical(format!(
        "Riccati recursion did not converge within {max_iter} iterations"
    )))
}

/// Structured doubling: `H_k -> P` quadratically from `A_0 = A`,
/// `G_0 = B R^{-1} B'`, `H_0 = Q`.
fn structured_doubling(sys: &LinearSystem, w: &CostWeights, tol: f64) -> Result<DMatrix<f64>> {
    let n = sys.n();
    let r_inv = w
        .r()
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("R is singular".into()))?;
    let mut a = sys.a().clone();
    let mut g = numeric::symmetrize(&(sys.b() * r_inv * sys.b().transpose()));
    let mut h = w.q().clone();
    let eye = DMatrix::<f64>::identity(n, n);
    for _ in 0..100 {
        let lu = (&eye + &g * &h).lu();
        let ia = lu
            .solve(&a)
            .ok_or_else(|| Error::Numerical("doubling step is singular".into()))?;
        let ig = lu
            .solve(&g)
            .ok_or_else(|| Error::Numerical("doubling step is singular".into()))?;
        let h_next = numeric::symmetrize(&(&h + a.transpose() * &h * &ia));
        g = numeric::symmetrize(&(&g + &a * ig * a.transpose()));
        a = &a * ia;
        let delta = (&h_next - &h).norm() / h_next.norm().max(1.0);
        h = h_next;
        if !h.iter().chain(a.iter()).all(|v| v.is_finite()) {
            return Err(Error::Numerical("doubling diverged".into()));
        }
        if delta <= tol {
            return Ok(h);
        }
    }
    Err(Error::Numerical("doubling did not converge".into()))
}

/// Newton steps on the DARE from `p`. `None` if the gain of `p` is not
/// stabilizing or the steps fail to reach `tol`.
fn newton_polish(sys: &LinearSystem, w: &CostWeights, p: &DMatrix<f64>, tol: f64) -> Option<DMatrix<f64>> {
    let mut p = p.clone();
    let mut best = f64::INFINITY;
    for _ in 0..30 {
        let k = lqr_gain(sys, w, &p).ok()?;
        let f = sys.closed_loop(&k).ok()?;
        let rhs = w.q() + k.matrix().transpose() * w.r() * k.matrix();
        let next = stein_doubling(&f, &rhs)?;
        let residual = dare_residual(sys, w, &next).ok()? / next.norm().max(1.0);
        let change = (&next - &p).norm() / next.norm().max(1.0);
        p = next;
        if residual <= tol || change <= tol {
            return Some(p);
        }
        if residual >= best && change <= 1e3 * tol {
            // Rounding floor: no further Newton progress is possible.
            return Some(p);
        }
        best = best.min(residual);
    }
    None
}

/// `X = sum_j (F^j)' Q F^j` by Smith's doubling; `None` unless `F` is
/// Schur-stable enough for the series to converge within 64 doublings.
fn stein_doubling(f: &DMatrix<f64>, q: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let mut x = q.clone();
    let mut a = f.clone();
    for _ in 0..64 {
        let term = a.transpose() * &x * &a;
        x += &term;
        if !x.iter().all(|v| v.is_finite()) {
            return None;
        }
        if term.norm() <= f64::EPSILON * x.norm() * 1e-2 {
            return Some(numeric::symmetrize(&x));
        }
        a = &a * &a;
    }
    None
}

/// `K* = (R + B'PB)^{-1} B'PA`, with control `u = -K* x`.
pub fn lqr_gain(sys: &LinearSystem, w: &CostWeights, p: &DMatrix<f64>) -> Result<Gain> {
    w.check_against(sys)?;
    let (a, b) = (sys.a(), sys.b());
    let bp = b.transpose() * p;
    let gram = w.r() + &bp * b;
    let k = gram
        .lu()
        .solve(&(bp * a))
        .ok_or_else(|| Error::Numerical("R + B'PB is singular".into()))?;
    Gain::new(k)
}

/// `Theta* = [[Q + A'PA, A'PB], [B'PA, R + B'PB]]`.
pub fn theta_star(sys: &LinearSystem, w: &CostWeights, p: &DMatrix<f64>) -> Result<QTheta> {
    w.check_against(sys)?;
    let s = sys.stacked();
    let theta = w.qbar() + s.transpose() * p * &s;
    QTheta::new(numeric::symmetrize(&theta), sys.n())
}

/// Unique solution of `Theta = Qbar + Phi' Theta Phi` by a dense solve of
/// the vectorized equation.
pub fn solve_dlyap(phi: &PhiMatrix, qbar: &DMatrix<f64>) -> Result<QTheta> {
    let n = phi.s().nrows();
    let x = dlyap_dense(phi.matrix(), qbar)?;
    QTheta::new(x, n)
}

/// Solves `X = Q + F' X F` for square `F` with `rho(F) < 1`.
pub fn dlyap_dense(f: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = f.nrows();
    if !f.is_square() || q.shape() != (d, d) {
        return Err(Error::invalid("Lyapunov operands must be square and conformant"));
    }
    let rho = numeric::spectral_radius(f)?;
    if rho >= 1.0 {
        return Err(Error::Precondition(format!(
            "Lyapunov map is not Schur stable (spectral radius {rho:.6})"
        )));
    }
    // vec(F' X F) = (F' kron F') vec(X) in column-major vec.
    let ft = f.transpose();
    let mut op = DMatrix::<f64>::identity(d * d, d * d);
    op -= ft.kronecker(&ft);
    let solver = PivotedSolver::new(&op)?;
    let rhs = DVector::from_column_slice(q.as_slice());
    let mut vec_x = solver
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("Lyapunov system is singular".into()))?;
    // One refinement step.
    if let Some(corr) = solver.solve(&(&rhs - &op * &vec_x)) {
        vec_x += corr;
    }
    let x = numeric::symmetrize(&DMatrix::from_column_slice(d, d, vec_x.as_slice()));
    Ok(x)
}

/// Model-based policy iteration from a stabilizing `K0`: returns
/// `(Theta^{i+1}, K^{i+1})` for `i = 0..iters`.
pub fn hewer_iteration(
    sys: &LinearSystem,
    w: &CostWeights,
    k0: &Gain,
    iters: usize,
) -> Result<Vec<(QTheta, Gain)>> {
    w.check_against(sys)?;
    let rho = sys.closed_loop_radius(k0)?;
    if rho >= 1.0 {
        return Err(Error::Precondition(format!(
            "initial gain is not stabilizing (spectral radius {rho:.6})"
        )));
    }
    let mut k = k0.clone();
    let mut out = Vec::with_capacity(iters);
    for iteration in 0..iters {
        let phi = PhiMatrix::new(sys, &k)?;
        let theta = solve_dlyap(&phi, w.qbar())?;
        k = policy_improvement(&theta).map_err(|_| Error::Improvement { iteration })?;
        out.push((theta, k.clone()));
    }
    Ok(out)
}
