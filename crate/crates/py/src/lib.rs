//! Python bindings. Matrices cross the boundary as lists of rows.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ddlqr::deadbeat::deadbeat_from_learning_data;
use ddlqr::excitation;
use ddlqr::numeric::rows_of;
use ddlqr::oracle::{self, DARE_MAX_ITER, DARE_TOL};
use ddlqr::qlearn::{self, LearningData};
use ddlqr::robustness::{self, NoisyConfig};
use ddlqr::{CostWeights, Error, LinearSystem, SamplingPlan, StopRule};

type Rows = Vec<Vec<f64>>;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) | Error::Parse { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn matrix(name: &str, rows: &Rows) -> PyResult<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err(format!("{name} must be a non-empty list of equal-length rows")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn system(a: &Rows, b: &Rows) -> PyResult<LinearSystem> {
    LinearSystem::new(matrix("A", a)?, matrix("B", b)?).map_err(py_err)
}

fn weights(sys: &LinearSystem, q: Option<Rows>, r: Option<Rows>) -> PyResult<CostWeights> {
    let q = q.map_or_else(|| Ok(DMatrix::identity(sys.n(), sys.n())), |q| matrix("Q", &q))?;
    let r = r.map_or_else(|| Ok(DMatrix::identity(sys.m(), sys.m())), |r| matrix("R", &r))?;
    CostWeights::new(q, r).map_err(py_err)
}

/// Random controllable plant with entries uniform in [-1, 1]; returns (A, B).
#[pyfunction]
fn random_system(n: usize, m: usize, seed: u64) -> PyResult<(Rows, Rows)> {
    let sys = LinearSystem::random_controllable(n, m, seed).map_err(py_err)?;
    Ok((rows_of(sys.a()), rows_of(sys.b())))
}

/// Riccati solution and optimal gain (u = -K x); returns (P, K).
#[pyfunction]
#[pyo3(signature = (a, b, q=None, r=None))]
fn dare(a: Rows, b: Rows, q: Option<Rows>, r: Option<Rows>) -> PyResult<(Rows, Rows)> {
    let sys = system(&a, &b)?;
    let w = weights(&sys, q, r)?;
    let p = oracle::solve_dare(&sys, &w, DARE_TOL, DARE_MAX_ITER).map_err(py_err)?;
    let k = oracle::lqr_gain(&sys, &w, &p).map_err(py_err)?;
    Ok((rows_of(&p), rows_of(k.matrix())))
}

/// Deadbeat gain designed from a seeded excitation experiment on (A, B).
#[pyfunction]
#[pyo3(signature = (a, b, seed=0))]
fn deadbeat(a: Rows, b: Rows, seed: u64) -> PyResult<Rows> {
    let sys = system(&a, &b)?;
    let ds = qlearn::collect_experiment(&sys, &DVector::zeros(sys.n()), seed, SamplingPlan::default()).map_err(py_err)?;
    let k = deadbeat_from_learning_data(&LearningData::from_dataset(&ds).map_err(py_err)?).map_err(py_err)?;
    Ok(rows_of(k.matrix()))
}

/// Full pipeline: experiment, deadbeat start, Q-learning. With
/// `iterations` the run length is fixed, otherwise it stops on `eps`.
#[pyfunction]
#[pyo3(signature = (a, b, seed=0, iterations=None, eps=qlearn::DEFAULT_EPS, q=None, r=None))]
fn learn<'py>(
    py: Python<'py>,
    a: Rows,
    b: Rows,
    seed: u64,
    iterations: Option<usize>,
    eps: f64,
    q: Option<Rows>,
    r: Option<Rows>,
) -> PyResult<Bound<'py, PyDict>> {
    let sys = system(&a, &b)?;
    let w = weights(&sys, q, r)?;
    let stop = match iterations {
        Some(n) => StopRule::Fixed(n),
        None => StopRule::Tolerance { eps, max_iter: qlearn::DEFAULT_MAX_ITER },
    };
    let ds = qlearn::collect_experiment(&sys, &DVector::zeros(sys.n()), seed, SamplingPlan::default()).map_err(py_err)?;
    let data = LearningData::from_dataset(&ds).map_err(py_err)?;
    let k0 = deadbeat_from_learning_data(&data).map_err(py_err)?;
    let run = qlearn::run_qlearning(&data, &k0, &w, stop, None).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("gain", rows_of(run.gain.matrix()))?;
    out.set_item("theta", rows_of(run.theta.matrix()))?;
    out.set_item("initial_gain", rows_of(k0.matrix()))?;
    out.set_item("iterations", run.iterations())?;
    out.set_item("wall_time_seconds", run.wall_time_seconds)?;
    Ok(out)
}

/// Whether `inputs` (m rows of N samples) is persistently exciting of `order`.
#[pyfunction]
fn is_persistently_exciting(inputs: Rows, order: usize) -> PyResult<bool> {
    excitation::is_persistently_exciting(&matrix("inputs", &inputs)?, order).map_err(py_err)
}

/// Noisy-measurement study; returns summary statistics and per-trial rows.
#[pyfunction]
#[pyo3(signature = (n=5, m=2, w_max=1e-3, trials=100, iterations=10, seed=0))]
fn noisy_experiment<'py>(
    py: Python<'py>,
    n: usize,
    m: usize,
    w_max: f64,
    trials: usize,
    iterations: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = NoisyConfig { n, m, w_max, trials, iterations, seed, plan: SamplingPlan::default() };
    let stats = py.detach(|| robustness::noisy_experiment(&cfg)).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("mean_error", stats.mean_error)?;
    out.set_item("max_error", stats.max_error)?;
    out.set_item("destabilized_count", stats.destabilized_count)?;
    out.set_item("failed_count", stats.failed_count)?;
    let rows: Vec<(usize, u64, f64, bool, f64, bool)> = stats
        .per_trial
        .iter()
        .map(|t| (t.trial, t.seed, t.error_norm, t.stabilizing, t.margin_lhs, t.margin_ok))
        .collect();
    out.set_item("per_trial", rows)?;
    Ok(out)
}

#[pymodule]
fn ddlqr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(random_system, m)?)?;
    m.add_function(wrap_pyfunction!(dare, m)?)?;
    m.add_function(wrap_pyfunction!(deadbeat, m)?)?;
    m.add_function(wrap_pyfunction!(learn, m)?)?;
    m.add_function(wrap_pyfunction!(is_persistently_exciting, m)?)?;
    m.add_function(wrap_pyfunction!(noisy_experiment, m)?)?;
    Ok(())
}
