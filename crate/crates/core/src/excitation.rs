//! Persistently exciting inputs and the rank conditions that certify an
//! experiment is informative enough for learning.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linops::hankel;
use crate::numeric;
use crate::systems::{seeded_rng, uniform_matrix, Dataset, LinearSystem, Trajectory};

/// Retry cap for rejection sampling of PE inputs.
pub const MAX_PE_DRAWS: usize = 100;

/// Minimum angle (radians) below which two data vectors count as parallel.
pub const PARALLEL_ANGLE_TOL: f64 = 1e-8;

/// Smallest N for which an m-channel input can be PE of order `order`.
pub const fn min_pe_length(m: usize, order: usize) -> usize {
    (m + 1) * order - 1
}

/// True iff the depth-`order` Hankel matrix of `inputs` (m x N) has full
/// row rank `m * order`.
pub fn is_persistently_exciting(inputs: &DMatrix<f64>, order: usize) -> Result<bool> {
    if order == 0 {
        return Err(Error::invalid("excitation order must be at least 1"));
    }
    let (m, n) = inputs.shape();
    if m == 0 || n < min_pe_length(m, order) {
        return Ok(false);
    }
    let h = hankel(inputs, order)?;
    Ok(numeric::numerical_rank(&h) == m * order)
}

/// Uniform `[-1, 1]` input of N samples, resampled until PE of `order`.
pub fn generate_pe_input(m: usize, order: usize, samples: usize, seed: u64) -> Result<DMatrix<f64>> {
    generate_pe_input_with(m, order, samples, &mut seeded_rng(seed, 0))
}

pub fn generate_pe_input_with<R: Rng + ?Sized>(
    m: usize,
    order: usize,
    samples: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if m == 0 || order == 0 {
        return Err(Error::invalid("PE input needs m >= 1 and order >= 1"));
    }
    let needed = min_pe_length(m, order);
    if samples < needed {
        return Err(Error::invalid(format!(
            "{samples} samples cannot be PE of order {order}: need N >= (m+1)L-1 = {needed}"
        )));
    }
    for _ in 0..MAX_PE_DRAWS {
        let u = uniform_matrix(rng, m, samples);
        if is_persistently_exciting(&u, order)? {
            return Ok(u);
        }
    }
    Err(Error::Internal(format!(
        "no PE input of order {order} after {MAX_PE_DRAWS} draws"
    )))
}

/// Aligned sample count of a trajectory: states and inputs both available.
fn aligned_len(traj: &Trajectory) -> usize {
    traj.len().min(traj.states().ncols())
}

/// Numerical rank of `[H_1(x); H_L(u)]`.
pub fn willems_rank(traj: &Trajectory, depth: usize) -> Result<usize> {
    let n_samples = aligned_len(traj);
    if depth == 0 || depth > n_samples {
        return Err(Error::invalid(format!(
            "depth {depth} needs between 1 and {n_samples} aligned samples"
        )));
    }
    let cols = n_samples - depth + 1;
    let hu = hankel(&traj.inputs().columns(0, n_samples).into_owned(), depth)?;
    let hx = traj.states().columns(0, cols);
    let (n, rows_u) = (hx.nrows(), hu.nrows());
    let mut stacked = DMatrix::zeros(n + rows_u, cols);
    stacked.rows_mut(0, n).copy_from(&hx);
    stacked.rows_mut(n, rows_u).copy_from(&hu);
    Ok(numeric::numerical_rank(&stacked))
}

/// Whether `[H_1(x); H_L(u)]` has the full rank `L m + n`.
pub fn check_willems_rank(traj: &Trajectory, depth: usize) -> Result<bool> {
    let expected = depth * traj.input_dim() + traj.state_dim();
    Ok(willems_rank(traj, depth)? == expected)
}

/// Least-squares representation of a candidate trajectory window as a
/// combination of recorded windows.
#[derive(Debug, Clone)]
pub struct WindowFit {
    pub alpha: DVector<f64>,
    pub residual: f64,
    pub feasible: bool,
}

/// Solves `[H_L(x); H_L(u)] alpha = [x_bar; u_bar]` in the least-squares
/// sense. `target_x` is n x L and `target_u` is m x L.
pub fn trajectory_from_data(
    traj: &Trajectory,
    depth: usize,
    target_x: &DMatrix<f64>,
    target_u: &DMatrix<f64>,
) -> Result<WindowFit> {
    let (n, m) = (traj.state_dim(), traj.input_dim());
    if target_x.shape() != (n, depth) || target_u.shape() != (m, depth) {
        return Err(Error::invalid(format!(
            "targets must be {n}x{depth} and {m}x{depth}"
        )));
    }
    let n_samples = aligned_len(traj);
    if depth == 0 || depth > n_samples {
        return Err(Error::invalid("window depth exceeds the recorded data"));
    }
    let hx = hankel(&traj.states().columns(0, n_samples).into_owned(), depth)?;
    let hu = hankel(&traj.inputs().columns(0, n_samples).into_owned(), depth)?;
    let cols = hx.ncols();
    let mut h = DMatrix::zeros(hx.nrows() + hu.nrows(), cols);
    h.rows_mut(0, hx.nrows()).copy_from(&hx);
    h.rows_mut(hx.nrows(), hu.nrows()).copy_from(&hu);
    let mut target = DVector::zeros(h.nrows());
    target
        .rows_mut(0, n * depth)
        .copy_from(&DVector::from_column_slice(target_x.as_slice()));
    target
        .rows_mut(n * depth, m * depth)
        .copy_from(&DVector::from_column_slice(target_u.as_slice()));

    let svd = h.clone().svd(true, true);
    let tol = numeric::rank_tolerance(&h, svd.singular_values.max());
    let alpha = svd
        .solve(&target, tol)
        .map_err(|e| Error::Numerical(format!("least-squares solve failed: {e}")))?;
    let residual = (&h * &alpha - &target).norm();
    let feasible = residual <= 1e-8 * (1.0 + target.norm());
    Ok(WindowFit {
        alpha,
        residual,
        feasible,
    })
}

/// Smallest angle between any two columns of `z`, in radians. Zero columns
/// count as parallel to everything.
pub fn min_pairwise_angle(z: &DMatrix<f64>) -> f64 {
    let norms: Vec<f64> = z.column_iter().map(|c| c.norm()).collect();
    let mut min = std::f64::consts::FRAC_PI_2;
    for i in 0..z.ncols() {
        for j in (i + 1)..z.ncols() {
            if norms[i] == 0.0 || norms[j] == 0.0 {
                return 0.0;
            }
            // Kahan's formula stays accurate for nearly parallel vectors.
            let a = z.column(i) / norms[i];
            let b = z.column(j) / norms[j];
            let theta = 2.0 * (&a - &b).norm().atan2((&a + &b).norm());
            min = min.min(theta.min(std::f64::consts::PI - theta));
        }
    }
    min
}

/// No column of `z` is a scalar multiple of another.
pub fn no_parallel_pairs(z: &DMatrix<f64>) -> bool {
    min_pairwise_angle(z) > PARALLEL_ANGLE_TOL
}

/// How the excitation experiment is laid out in time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingPlan {
    /// One open-loop run from the supplied initial state.
    SingleRun,
    /// Restart the plant from a fresh uniform `[-1, 1]^n` state every
    /// `horizon` samples. The first segment starts from the supplied state.
    Restarts { horizon: usize },
}

impl Default for SamplingPlan {
    fn default() -> Self {
        SamplingPlan::Restarts { horizon: 1 }
    }
}

/// Applies a PE input of `order` for `samples` steps according to `plan`.
pub fn run_experiment<R: Rng + ?Sized>(
    sys: &LinearSystem,
    x0: &DVector<f64>,
    samples: usize,
    order: usize,
    plan: SamplingPlan,
    rng: &mut R,
) -> Result<Dataset> {
    let inputs = generate_pe_input_with(sys.m(), order, samples, rng)?;
    match plan {
        SamplingPlan::SingleRun => Ok(sys.simulate(x0, &inputs)?.into()),
        SamplingPlan::Restarts { horizon } => {
            if horizon == 0 {
                return Err(Error::invalid("restart horizon must be at least 1"));
            }
            let mut segments = Vec::with_capacity(samples.div_ceil(horizon));
            let mut start = 0;
            while start < samples {
                let len = horizon.min(samples - start);
                let x_init = if start == 0 {
                    x0.clone()
                } else {
                    DVector::from_fn(sys.n(), |_, _| rng.random_range(-1.0..=1.0))
                };
                segments.push(sys.simulate(&x_init, &inputs.columns(start, len).into_owned())?);
                start += len;
            }
            Dataset::new(segments)
        }
    }
}
