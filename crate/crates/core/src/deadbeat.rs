//! Deadbeat state feedback computed from data alone. It serves as the
//! stabilizing initial gain for Q-learning.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numeric;
use crate::qlearn::{Gain, LearningData};
use crate::systems::{Trajectory, Transitions};

/// `h0x = [x_0 .. x_{N-2}]`, `h1x = [x_1 .. x_{N-1}]`, `h0u = [u_0 .. u_{N-2}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrices {
    pub h0x: DMatrix<f64>,
    pub h1x: DMatrix<f64>,
    pub h0u: DMatrix<f64>,
}

impl DataMatrices {
    pub fn from_transitions(t: &Transitions) -> Result<Self> {
        let (n, m) = (t.states.nrows(), t.inputs.nrows());
        let needed = (m + 1) * (n + 1) - 1;
        if t.len() + 1 < needed {
            return Err(Error::invalid(format!(
                "{} transitions are too few: need at least {} samples",
                t.len(),
                needed
            )));
        }
        Ok(DataMatrices {
            h0x: t.states.clone(),
            h1x: t.successors.clone(),
            h0u: t.inputs.clone(),
        })
    }

    pub fn from_learning_data(data: &LearningData) -> Result<Self> {
        let n = data.n();
        Self::from_transitions(&Transitions {
            states: data.z().rows(0, n).into_owned(),
            inputs: data.z().rows(n, data.m()).into_owned(),
            successors: data.x_next().clone(),
        })
    }
}

/// Splits a single trajectory of N states into the shifted data matrices.
pub fn data_matrices(traj: &Trajectory) -> Result<DataMatrices> {
    let n_states = traj.states().ncols();
    let (n, m) = (traj.state_dim(), traj.input_dim());
    let needed = (m + 1) * (n + 1) - 1;
    if n_states < needed {
        return Err(Error::invalid(format!(
            "{n_states} state samples are too few: need N >= (m+1)(n+1)-1 = {needed}"
        )));
    }
    let cols = (n_states - 1).min(traj.len());
    Ok(DataMatrices {
        h0x: traj.states().columns(0, cols).into_owned(),
        h1x: traj.states().columns(1, cols).into_owned(),
        h0u: traj.inputs().columns(0, cols).into_owned(),
    })
}

/// `Abar = h1x F` and `Bbar = h1x G` with `F = pinv(h0x)` and `G` an
/// orthonormal basis of the right nullspace of `h0x`.
#[derive(Debug, Clone)]
pub struct FictitiousSystem {
    pub a_bar: DMatrix<f64>,
    pub b_bar: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
}

pub fn fictitious_system(h0x: &DMatrix<f64>, h1x: &DMatrix<f64>) -> Result<FictitiousSystem> {
    let n = h0x.nrows();
    if h1x.shape() != h0x.shape() {
        return Err(Error::invalid("h0x and h1x must have the same shape"));
    }
    let rank = numeric::numerical_rank(h0x);
    if rank < n {
        return Err(Error::Rank(format!(
            "state data has rank {rank} < n = {n}; the input is not exciting enough"
        )));
    }
    let f = numeric::pseudoinverse(h0x)?;
    let g = numeric::null_space(h0x);
    Ok(FictitiousSystem {
        a_bar: h1x * &f,
        b_bar: h1x * &g,
        f,
        g,
    })
}

/// Greedy pivoted Gram-Schmidt over the columns of `b_bar`. Each step keeps
/// the column making the largest angle with the span of those already
/// kept (ties go to the lowest index), until the rank of `b_bar` at
/// absolute tolerance `tol` is reached. `kept` is returned in ascending
/// order.
pub fn select_independent_columns(b_bar: &DMatrix<f64>, tol: f64) -> (DMatrix<f64>, Vec<usize>) {
    let target = numeric::rank_above(b_bar, tol);
    let norms: Vec<f64> = b_bar.column_iter().map(|c| c.norm()).collect();
    let mut residual = b_bar.clone();
    let mut kept = Vec::with_capacity(target);
    while kept.len() < target {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..b_bar.ncols() {
            let r = residual.column(j).norm();
            if kept.contains(&j) || r <= tol {
                continue;
            }
            let ratio = r / norms[j];
            if best.is_none_or(|(_, b)| ratio > b * (1.0 + 1e-12)) {
                best = Some((j, ratio));
            }
        }
        let Some((pick, _)) = best else { break };
        let q = residual.column(pick).normalize();
        for j in 0..b_bar.ncols() {
            // Two passes of projection keep the residuals orthogonal.
            for _ in 0..2 {
                let c = q.dot(&residual.column(j));
                residual.column_mut(j).axpy(-c, &q, 1.0);
            }
        }
        kept.push(pick);
    }
    kept.sort_unstable();
    (b_bar.select_columns(&kept), kept)
}

/// Luenberger controller form `Ac = T A T^{-1}`, `Bc = T B`. `indices`
/// holds the controllability index of each input column, in column order.
#[derive(Debug, Clone)]
pub struct CanonicalForm {
    pub ac: DMatrix<f64>,
    pub bc: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub indices: Vec<usize>,
}

impl CanonicalForm {
    /// Rows `sigma_j - 1` (zero-based), with `sigma_j` the running sums of
    /// the indices; these carry the free parameters of the form.
    pub fn pivot_rows(&self) -> Vec<usize> {
        let mut sigma = 0;
        self.indices
            .iter()
            .filter(|&&mu| mu > 0)
            .map(|&mu| {
                sigma += mu;
                sigma - 1
            })
            .collect()
    }
}

/// Relative residual below which a Krylov vector counts as dependent.
const KRYLOV_TOL: f64 = 1e-10;

pub fn mimo_controllable_form(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<CanonicalForm> {
    let (n, r) = b.shape();
    if !a.is_square() || a.nrows() != n {
        return Err(Error::invalid("A must be n x n and B must have n rows"));
    }
    if r == 0 {
        return Err(Error::Controllability("no input columns".into()));
    }
    let mut indices = vec![0usize; r];
    let mut active = vec![true; r];
    let mut chain: Vec<DVector<f64>> = (0..r).map(|j| b.column(j).into_owned()).collect();
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(n);
    'search: for _ in 0..n {
        for j in 0..r {
            if !active[j] {
                continue;
            }
            let v = &chain[j];
            let mut res = v.clone();
            for _ in 0..2 {
                for q in &basis {
                    res.axpy(-q.dot(&res), q, 1.0);
                }
            }
            if res.norm() > KRYLOV_TOL * v.norm() && v.norm() > 0.0 {
                let norm = res.norm();
                basis.push(res / norm);
                indices[j] += 1;
                chain[j] = a * &chain[j];
            } else {
                active[j] = false;
            }
            if basis.len() == n {
                break 'search;
            }
        }
        if !active.iter().any(|x| *x) {
            break;
        }
    }
    if basis.len() < n {
        return Err(Error::Controllability(format!(
            "controllable subspace has dimension {} < n = {n}",
            basis.len()
        )));
    }

    // Columns b_j, A b_j, .., A^{mu_j - 1} b_j grouped per input.
    let mut cb = DMatrix::zeros(n, n);
    let mut col = 0;
    for (j, &mu) in indices.iter().enumerate() {
        let mut v = b.column(j).into_owned();
        for _ in 0..mu {
            cb.set_column(col, &v);
            v = a * v;
            col += 1;
        }
    }
    let cb_inv = cb
        .try_inverse()
        .ok_or_else(|| Error::Controllability("Krylov basis is singular".into()))?;
    let mut t = DMatrix::zeros(n, n);
    let mut row = 0;
    let mut sigma = 0;
    for &mu in &indices {
        if mu == 0 {
            continue;
        }
        sigma += mu;
        let mut q = cb_inv.row(sigma - 1).into_owned();
        for _ in 0..mu {
            t.set_row(row, &q);
            q = &q * a;
            row += 1;
        }
    }
    let t_inv = t
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Controllability("canonical transform is singular".into()))?;
    Ok(CanonicalForm {
        ac: &t * a * t_inv,
        bc: &t * b,
        t,
        indices,
    })
}

/// `Hc = Bm^{-1} Am` from the pivot rows, so that `Ac - Bc Hc` is a block
/// shift and therefore nilpotent.
pub fn deadbeat_gain_canonical(form: &CanonicalForm) -> Result<DMatrix<f64>> {
    let (n, r) = form.bc.shape();
    let pivots = form.pivot_rows();
    if form.indices.iter().sum::<usize>() != n || form.ac.shape() != (n, n) {
        return Err(Error::Structure(format!(
            "controllability indices {:?} do not add up to n = {n}",
            form.indices
        )));
    }
    if form.indices.iter().any(|&mu| mu == 0) {
        return Err(Error::Structure(format!(
            "input columns with zero controllability index: {:?}",
            form.indices
        )));
    }
    let am = form.ac.select_rows(&pivots);
    let bm = form.bc.select_rows(&pivots);
    debug_assert_eq!(bm.shape(), (r, r));
    bm.lu()
        .solve(&am)
        .filter(|h| h.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Structure("pivot rows of Bc are singular".into()))
}

/// Intermediate products of the deadbeat design, kept for inspection.
#[derive(Debug, Clone)]
pub struct DeadbeatDesign {
    pub gain: Gain,
    pub system: FictitiousSystem,
    pub b_bar_f: DMatrix<f64>,
    pub kept: Vec<usize>,
    pub form: CanonicalForm,
    pub h_f: DMatrix<f64>,
    pub h_bar: DMatrix<f64>,
}

/// Full design from data matrices. With `u = -K x` the gain is
/// `K_db = h0u (G Hbar - F)`, which makes `A - B K_db = Abar - Bbar Hbar`
/// nilpotent.
pub fn deadbeat_design(dm: &DataMatrices) -> Result<DeadbeatDesign> {
    let n = dm.h0x.nrows();
    let system = fictitious_system(&dm.h0x, &dm.h1x).map_err(|e| e.at_step("fictitious system"))?;
    let cols = dm.h1x.ncols();
    let tol = 10.0 * f64::EPSILON * n.max(cols) as f64 * numeric::spectral_norm(&dm.h1x);
    let (b_bar_f, kept) = select_independent_columns(&system.b_bar, tol);
    if kept.is_empty() {
        return Err(Error::Unsupported(
            "the data leaves no free input directions (rank of Bbar is zero)".into(),
        )
        .at_step("column selection"));
    }
    // Different orderings of the kept columns give different canonical
    // forms and, with several inputs, deadbeat gains whose norms can differ
    // by orders of magnitude. Small input counts are searched exhaustively.
    let mut best: Option<(f64, DeadbeatDesignParts)> = None;
    let mut last_err = None;
    for order in column_orders(kept.len()) {
        match design_for_order(dm, &system, &b_bar_f, &kept, &order) {
            Ok(parts) => {
                let norm = numeric::spectral_norm(parts.gain.matrix());
                if best.as_ref().is_none_or(|(b, _)| norm < *b) {
                    best = Some((norm, parts));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let (_, parts) = match best {
        Some(b) => b,
        None => return Err(last_err.expect("at least one column order is tried")),
    };
    let DeadbeatDesignParts { gain, form, h_f, h_bar } = parts;
    Ok(DeadbeatDesign {
        gain,
        system,
        b_bar_f,
        kept,
        form,
        h_f,
        h_bar,
    })
}

struct DeadbeatDesignParts {
    gain: Gain,
    form: CanonicalForm,
    h_f: DMatrix<f64>,
    h_bar: DMatrix<f64>,
}

/// Above this many kept columns only the natural order is tried.
const MAX_PERMUTED_COLUMNS: usize = 4;

fn column_orders(r: usize) -> Vec<Vec<usize>> {
    fn extend(prefix: &mut Vec<usize>, r: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == r {
            out.push(prefix.clone());
            return;
        }
        for j in 0..r {
            if !prefix.contains(&j) {
                prefix.push(j);
                extend(prefix, r, out);
                prefix.pop();
            }
        }
    }
    if r > MAX_PERMUTED_COLUMNS {
        return vec![(0..r).collect()];
    }
    let mut out = Vec::new();
    extend(&mut Vec::with_capacity(r), r, &mut out);
    out
}

fn design_for_order(
    dm: &DataMatrices,
    system: &FictitiousSystem,
    b_bar_f: &DMatrix<f64>,
    kept: &[usize],
    order: &[usize],
) -> Result<DeadbeatDesignParts> {
    let n = dm.h0x.nrows();
    let b_ordered = b_bar_f.select_columns(order);
    let form = mimo_controllable_form(&system.a_bar, &b_ordered).map_err(|e| e.at_step("canonical form"))?;
    let hc = deadbeat_gain_canonical(&form).map_err(|e| e.at_step("canonical gain"))?;
    let h_ordered = hc * &form.t;
    let mut h_f = DMatrix::zeros(kept.len(), n);
    for (row, &j) in order.iter().enumerate() {
        h_f.set_row(j, &h_ordered.row(row));
    }
    let mut h_bar = DMatrix::zeros(system.b_bar.ncols(), n);
    for (row, &j) in kept.iter().enumerate() {
        h_bar.set_row(j, &h_f.row(row));
    }
    let k = &dm.h0u * (&system.g * &h_bar - &system.f);
    let gain = Gain::new(k).map_err(|e| e.at_step("gain"))?;
    Ok(DeadbeatDesignParts { gain, form, h_f, h_bar })
}

/// Deadbeat gain from one recorded trajectory.
pub fn deadbeat_from_data(traj: &Trajectory) -> Result<Gain> {
    let dm = data_matrices(traj).map_err(|e| e.at_step("data matrices"))?;
    deadbeat_design(&dm).map(|d| d.gain)
}

/// Deadbeat gain from the transitions already gathered for learning.
pub fn deadbeat_from_learning_data(data: &LearningData) -> Result<Gain> {
    let dm = DataMatrices::from_learning_data(data).map_err(|e| e.at_step("data matrices"))?;
    deadbeat_design(&dm).map(|d| d.gain)
}
