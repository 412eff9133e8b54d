//! Off-policy Q-learning for LQR from one batch of exciting data.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::excitation::{self, SamplingPlan};
use crate::linops::{sym_len, unvec_slice, write_quad_monomials};
use crate::numeric::{self, DoubleDouble, PivotedSolver};
use crate::oracle::CostWeights;
use crate::systems::{seeded_rng, Dataset, LinearSystem, Transitions};

/// Above this condition estimate the regressor solve is rejected.
pub const MAX_REGRESSOR_CONDITION: f64 = 1e15;
const REFINEMENT_STEPS: usize = 6;
pub const DEFAULT_EPS: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 50;

/// State feedback `u = -K x`, with `K` of shape m x n.
#[derive(Debug, Clone, PartialEq)]
pub struct Gain {
    k: DMatrix<f64>,
}

impl Gain {
    pub fn new(k: DMatrix<f64>) -> Result<Self> {
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("gain has non-finite entries"));
        }
        Ok(Gain { k })
    }

    pub fn zeros(m: usize, n: usize) -> Self {
        Gain { k: DMatrix::zeros(m, n) }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.k
    }

    pub fn m(&self) -> usize {
        self.k.nrows()
    }

    pub fn n(&self) -> usize {
        self.k.ncols()
    }

    /// Spectral norm of `self - other`.
    pub fn distance(&self, other: &Gain) -> f64 {
        numeric::spectral_norm(&(&self.k - &other.k))
    }
}

/// Symmetric Q-function kernel over `z = [x; u]`, partitioned as
/// `[[Theta_xx, Theta_ux'], [Theta_ux, Theta_uu]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QTheta {
    theta: DMatrix<f64>,
    n: usize,
}

impl QTheta {
    pub fn new(theta: DMatrix<f64>, n: usize) -> Result<Self> {
        if !theta.is_square() || n == 0 || n >= theta.nrows() {
            return Err(Error::invalid(format!(
                "kernel of shape {:?} cannot be split with n = {n}",
                theta.shape()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("kernel has non-finite entries".into()));
        }
        if numeric::asymmetry(&theta) > 1e-10 * theta.amax().max(1.0) {
            return Err(Error::invalid("kernel is not symmetric"));
        }
        Ok(QTheta {
            theta: numeric::symmetrize(&theta),
            n,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.theta
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.theta.nrows() - self.n
    }

    pub fn theta_xx(&self) -> DMatrix<f64> {
        self.theta.view((0, 0), (self.n, self.n)).into_owned()
    }

    pub fn theta_ux(&self) -> DMatrix<f64> {
        self.theta.view((self.n, 0), (self.m(), self.n)).into_owned()
    }

    pub fn theta_uu(&self) -> DMatrix<f64> {
        self.theta.view((self.n, self.n), (self.m(), self.m())).into_owned()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        numeric::min_eigenvalue(&self.theta)
    }
}

/// Samples `z_k = [x_k; u_k]` with their successor states. The first `eta`
/// samples enter the regression; any further samples are kept for
/// inspection only.
#[derive(Debug, Clone, PartialEq)]
pub struct LearningData {
    z: DMatrix<f64>,
    x_next: DMatrix<f64>,
    n: usize,
    m: usize,
}

impl LearningData {
    pub fn from_transitions(t: &Transitions) -> Result<Self> {
        let (n, m) = (t.states.nrows(), t.inputs.nrows());
        if n == 0 || m == 0 {
            return Err(Error::invalid("learning data needs n >= 1 and m >= 1"));
        }
        if t.inputs.ncols() != t.len() || t.successors.shape() != (n, t.len()) {
            return Err(Error::invalid("transition arrays are misaligned"));
        }
        let eta = sym_len(n + m);
        if t.len() < eta {
            return Err(Error::invalid(format!(
                "{} transitions are fewer than the {eta} unknowns of the kernel",
                t.len()
            )));
        }
        let mut z = DMatrix::zeros(n + m, t.len());
        z.rows_mut(0, n).copy_from(&t.states);
        z.rows_mut(n, m).copy_from(&t.inputs);
        Ok(LearningData {
            z,
            x_next: t.successors.clone(),
            n,
            m,
        })
    }

    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        Self::from_transitions(&ds.transitions())
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn x_next(&self) -> &DMatrix<f64> {
        &self.x_next
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn eta(&self) -> usize {
        sym_len(self.n + self.m)
    }

    pub fn sample_count(&self) -> usize {
        self.z.ncols()
    }

    /// `zeta_k = [x_{k+1}; -K x_{k+1}]` for the regression samples.
    pub fn zeta(&self, k: &Gain) -> DMatrix<f64> {
        let eta = self.eta();
        let xn = self.x_next.columns(0, eta);
        let mut zeta = DMatrix::zeros(self.n + self.m, eta);
        zeta.rows_mut(0, self.n).copy_from(&xn);
        zeta.rows_mut(self.n, self.m).copy_from(&(-k.matrix() * xn));
        zeta
    }
}

/// Runs a PE experiment with `eta + 1` samples and packages it for
/// learning. The input is certified PE of order n + 1, the samples span
/// `R^{n+m}` and no two of them are parallel.
pub fn collect_learning_data(
    sys: &LinearSystem,
    x0: &DVector<f64>,
    seed: u64,
    plan: SamplingPlan,
) -> Result<LearningData> {
    LearningData::from_dataset(&collect_experiment(sys, x0, seed, plan)?)
}

/// The certified experiment behind [`collect_learning_data`], kept as a
/// dataset so that measurement noise can be applied per segment.
pub fn collect_experiment(sys: &LinearSystem, x0: &DVector<f64>, seed: u64, plan: SamplingPlan) -> Result<Dataset> {
    let (n, m) = (sys.n(), sys.m());
    if x0.len() != n {
        return Err(Error::invalid("initial state has the wrong dimension"));
    }
    let eta = sym_len(n + m);
    let samples = eta + 1;
    let order = n + 1;
    if samples < excitation::min_pe_length(m, order) {
        return Err(Error::invalid("sample budget too short for PE of order n+1"));
    }
    let mut rng = seeded_rng(seed, 1);
    for _ in 0..excitation::MAX_PE_DRAWS {
        let ds = excitation::run_experiment(sys, x0, samples, order, plan, &mut rng)?;
        let data = LearningData::from_dataset(&ds)?;
        if !data.z.iter().chain(data.x_next.iter()).all(|v| v.is_finite()) {
            return Err(Error::Numerical("experiment produced non-finite states".into()));
        }
        if numeric::numerical_rank(&data.z) == n + m && excitation::no_parallel_pairs(&data.z) {
            return Ok(ds);
        }
    }
    Err(Error::Internal(format!(
        "no certified experiment after {} attempts",
        excitation::MAX_PE_DRAWS
    )))
}

/// `V` (eta x eta) with column k equal to `qm(z_k) - qm(zeta_k)`, and
/// `C_k = z_k' Qbar z_k`.
pub fn build_regressor(data: &LearningData, k: &Gain, w: &CostWeights) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (vt, c) = regressor_rows(data, k, w)?;
    Ok((vt.transpose(), c))
}

/// Transposed regressor `V'`, one equation per row.
fn regressor_rows(data: &LearningData, k: &Gain, w: &CostWeights) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_dims(data, k, w)?;
    let eta = data.eta();
    let d = data.n + data.m;
    let zeta = data.zeta(k);
    let mut vt = DMatrix::zeros(eta, eta);
    let mut c = DVector::zeros(eta);
    let mut a = vec![0.0; eta];
    let mut b = vec![0.0; eta];
    for row in 0..eta {
        let z = data.z.column(row);
        write_quad_monomials(z.as_slice(), &mut a);
        write_quad_monomials(zeta.column(row).as_slice(), &mut b);
        for j in 0..eta {
            vt[(row, j)] = a[j] - b[j];
        }
        c[row] = (z.transpose() * w.qbar() * z)[(0, 0)];
    }
    debug_assert_eq!(d * (d + 1) / 2, eta);
    Ok((vt, c))
}

fn check_dims(data: &LearningData, k: &Gain, w: &CostWeights) -> Result<()> {
    if k.m() != data.m || k.n() != data.n {
        return Err(Error::invalid(format!(
            "gain is {}x{} but the data needs {}x{}",
            k.m(),
            k.n(),
            data.m,
            data.n
        )));
    }
    if w.n() != data.n || w.m() != data.m {
        return Err(Error::invalid("weights do not match the data dimensions"));
    }
    Ok(())
}

/// Kernel of `K` estimated from data, with the regressor's condition
/// estimate.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub theta: QTheta,
    pub condition: f64,
}

/// Solves `V' vec(Theta) = C` for the kernel of `K`.
pub fn policy_evaluation(data: &LearningData, k: &Gain, w: &CostWeights) -> Result<QTheta> {
    evaluate(data, k, w, 0).map(|e| e.theta)
}

/// Policy evaluation reporting `iteration` in its errors. Rows and then
/// columns are equilibrated before the pivoted LU; one step of iterative refinement
/// uses residuals formed in double-double arithmetic straight from the
/// samples, which removes most of the rounding picked up while forming
/// the monomial differences.
pub fn evaluate(data: &LearningData, k: &Gain, w: &CostWeights, iteration: usize) -> Result<Evaluation> {
    let (mut vt, mut c) = regressor_rows(data, k, w)?;
    let eta = data.eta();
    let mut row_scale = vec![1.0; eta];
    for (row, s) in row_scale.iter_mut().enumerate() {
        let amax = vt.row(row).amax();
        if amax > 0.0 {
            *s = 1.0 / amax;
            vt.row_mut(row).scale_mut(*s);
            c[row] *= *s;
        }
    }
    // Large gains blow up the zeta monomials, leaving columns whose scales
    // differ by many orders of magnitude; column scaling takes that out.
    let mut col_scale = vec![1.0; eta];
    for (col, s) in col_scale.iter_mut().enumerate() {
        let amax = vt.column(col).amax();
        if amax > 0.0 {
            *s = 1.0 / amax;
            vt.column_mut(col).scale_mut(*s);
        }
    }
    let unscale = |y: DVector<f64>| DVector::from_iterator(eta, y.iter().zip(&col_scale).map(|(v, s)| v * s));
    let solver = PivotedSolver::new(&vt)?;
    let condition = solver.condition_estimate();
    if !(condition <= MAX_REGRESSOR_CONDITION) {
        return Err(Error::SingularRegressor { iteration, condition });
    }
    let mut theta_vec = unscale(
        solver
            .solve(&c)
            .ok_or(Error::SingularRegressor { iteration, condition })?,
    );

    for _ in 0..REFINEMENT_STEPS {
        let residual = dd_residual(data, k, w, theta_vec.as_slice())?;
        let scaled = DVector::from_iterator(eta, residual.iter().zip(&row_scale).map(|(r, s)| r * s));
        let Some(corr) = solver.solve(&scaled) else { break };
        let corr = unscale(corr);
        let done = corr.amax() <= f64::EPSILON * theta_vec.amax();
        theta_vec += corr;
        if done {
            break;
        }
    }
    let theta = numeric::symmetrize(&unvec_slice(theta_vec.as_slice())?);
    Ok(Evaluation {
        theta: QTheta::new(theta, data.n)?,
        condition,
    })
}

/// `z_k' Qbar z_k - z_k' Theta z_k + zeta_k' Theta zeta_k` in double-double,
/// with `zeta_k` itself formed in double-double.
fn dd_residual(data: &LearningData, k: &Gain, w: &CostWeights, theta_vec: &[f64]) -> Result<Vec<f64>> {
    let theta = unvec_slice(theta_vec)?;
    let (n, m) = (data.n, data.m);
    let km = k.matrix();
    let mut z = vec![DoubleDouble::ZERO; n + m];
    let mut zeta = vec![DoubleDouble::ZERO; n + m];
    let mut out = Vec::with_capacity(data.eta());
    for col in 0..data.eta() {
        for i in 0..n + m {
            z[i] = DoubleDouble::from_f64(data.z[(i, col)]);
        }
        for i in 0..n {
            zeta[i] = DoubleDouble::from_f64(data.x_next[(i, col)]);
        }
        for r in 0..m {
            let mut acc = DoubleDouble::ZERO;
            for j in 0..n {
                acc = acc.add(zeta[j].mul_f64(km[(r, j)]));
            }
            zeta[n + r] = acc.neg();
        }
        let cost = numeric::quadratic_form_dd(w.qbar(), &z);
        let lhs = numeric::quadratic_form_dd(&theta, &z).sub(numeric::quadratic_form_dd(&theta, &zeta));
        out.push(cost.sub(lhs).to_f64());
    }
    Ok(out)
}

/// `K = Theta_uu^{-1} Theta_ux`, so that `u = -K x` minimizes the kernel.
pub fn policy_improvement(theta: &QTheta) -> Result<Gain> {
    let uu = theta.theta_uu();
    let scale = uu.amax();
    let solved = if scale > 0.0 && numeric::singular_values(&uu).min() > scale * 1e-14 {
        uu.lu().solve(&theta.theta_ux())
    } else {
        None
    };
    match solved {
        Some(k) if k.iter().all(|v| v.is_finite()) => Gain::new(k),
        _ => Err(Error::Improvement { iteration: 0 }),
    }
}

/// When to stop iterating.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    /// Stop once `||K^{i+1} - K^i||_2 <= eps`; failing that within
    /// `max_iter` iterations is an error.
    Tolerance { eps: f64, max_iter: usize },
    /// Run exactly this many iterations.
    Fixed(usize),
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule::Tolerance {
            eps: DEFAULT_EPS,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub gain_delta: f64,
    #[serde(rename = "cond_V")]
    pub cond_v: f64,
    pub min_eig_theta: f64,
    /// Smallest eigenvalue of `Theta^i - Theta^{i+1}`; absent on the first
    /// iteration, which has no previous kernel.
    pub monotone_gap: Option<f64>,
    /// Spectral radius of `A - B K^i`, present only when auditing.
    pub closed_loop_radius: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunDiagnostics {
    pub records: Vec<IterationRecord>,
}

impl RunDiagnostics {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct QLearnRun {
    pub gain: Gain,
    pub theta: QTheta,
    pub diagnostics: RunDiagnostics,
    /// `(Theta^{i+1}, K^{i+1})` for every completed iteration.
    pub history: Vec<(QTheta, Gain)>,
    pub wall_time_seconds: f64,
}

impl QLearnRun {
    pub fn iterations(&self) -> usize {
        self.history.len()
    }

    pub fn report(&self) -> QLearnReport {
        let (n, m) = (self.gain.n(), self.gain.m());
        QLearnReport {
            n,
            m,
            eta: sym_len(n + m),
            iterations: self.iterations(),
            final_gain: numeric::rows_of(self.gain.matrix()),
            final_theta: numeric::rows_of(self.theta.matrix()),
            per_iteration: self.diagnostics.records.clone(),
            wall_time_seconds: self.wall_time_seconds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QLearnReport {
    pub n: usize,
    pub m: usize,
    pub eta: usize,
    pub iterations: usize,
    pub final_gain: Vec<Vec<f64>>,
    pub final_theta: Vec<Vec<f64>>,
    pub per_iteration: Vec<IterationRecord>,
    pub wall_time_seconds: f64,
}

/// Alternates policy evaluation and improvement from `K0`. The plant is
/// only touched when `audit` is given, and then only to record the
/// closed-loop spectral radius of each iterate.
pub fn run_qlearning(
    data: &LearningData,
    k0: &Gain,
    w: &CostWeights,
    stop: StopRule,
    audit: Option<&LinearSystem>,
) -> Result<QLearnRun> {
    check_dims(data, k0, w)?;
    let start = Instant::now();
    let (max_iter, eps) = match stop {
        StopRule::Tolerance { eps, max_iter } => (max_iter, Some(eps)),
        StopRule::Fixed(iters) => (iters, None),
    };
    if max_iter == 0 {
        return Err(Error::invalid("at least one iteration is required"));
    }
    let mut k = k0.clone();
    let mut prev_theta: Option<DMatrix<f64>> = None;
    let mut diagnostics = RunDiagnostics::default();
    let mut history = Vec::new();
    let mut last_delta = f64::INFINITY;
    for iteration in 0..max_iter {
        let closed_loop_radius = audit.map(|sys| sys.closed_loop_radius(&k)).transpose()?;
        let eval = evaluate(data, &k, w, iteration)?;
        let next = policy_improvement(&eval.theta).map_err(|_| Error::Improvement { iteration })?;
        last_delta = next.distance(&k);
        let monotone_gap = prev_theta
            .as_ref()
            .map(|p| numeric::min_eigenvalue(&(p - eval.theta.matrix())));
        let record = IterationRecord {
            iteration,
            gain_delta: last_delta,
            cond_v: eval.condition,
            min_eig_theta: eval.theta.min_eigenvalue(),
            monotone_gap,
            closed_loop_radius,
        };
        log::debug!(
            "iteration {iteration}: |dK| = {:.3e}, cond = {:.3e}",
            record.gain_delta,
            record.cond_v
        );
        if record.min_eig_theta <= 0.0 {
            log::info!("iteration {iteration}: kernel is not positive definite");
        }
        diagnostics.records.push(record);
        prev_theta = Some(eval.theta.matrix().clone());
        history.push((eval.theta, next.clone()));
        k = next;
        if eps.is_some_and(|e| last_delta <= e) {
            break;
        }
    }
    if let Some(e) = eps {
        if last_delta > e {
            return Err(Error::NoConvergence {
                iterations: max_iter,
                last_delta,
                diagnostics: Box::new(diagnostics),
            });
        }
    }
    let theta = history.last().expect("at least one iteration").0.clone();
    Ok(QLearnRun {
        gain: k,
        theta,
        diagnostics,
        history,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    })
}
