//! Discrete-time LTI plants `x_{k+1} = A x_k + B u_k`, their simulation,
//! and the recorded data the learner gets to see.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric;
use crate::qlearn::Gain;

/// Retry cap for rejection sampling of random plants.
pub const MAX_SYSTEM_DRAWS: usize = 100;

/// Deterministic RNG for `(seed, stream)`. Distinct streams are independent,
/// so per-trial randomness does not depend on scheduling order.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn uniform_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    // Column-major fill order is part of the determinism contract.
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..=1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || !a.is_square() {
            return Err(Error::invalid(format!(
                "A must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::invalid(format!(
                "B must be {n}xm with m >= 1, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("system matrices must be finite"));
        }
        Ok(LinearSystem { a, b })
    }

    /// Scalar plant `x+ = a x + b u`.
    pub fn scalar(a: f64, b: f64) -> Result<Self> {
        Self::new(DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, b))
    }

    /// Draws `A` and `B` with entries uniform in `[-1, 1]`, redrawing until
    /// the pair is controllable.
    pub fn random_controllable(n: usize, m: usize, seed: u64) -> Result<Self> {
        Self::random_controllable_with(n, m, &mut seeded_rng(seed, 0))
    }

    pub fn random_controllable_with<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::invalid("random system needs n >= 1 and m >= 1"));
        }
        for _ in 0..MAX_SYSTEM_DRAWS {
            let a = uniform_matrix(rng, n, n);
            let b = uniform_matrix(rng, n, m);
            let sys = LinearSystem { a, b };
            if sys.controllability_rank() == n {
                return Ok(sys);
            }
        }
        Err(Error::Internal(format!(
            "no controllable {n}x{m} system after {MAX_SYSTEM_DRAWS} draws"
        )))
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// `[A B]`, the map from `z = [x; u]` to the successor state.
    pub fn stacked(&self) -> DMatrix<f64> {
        let (n, m) = (self.n(), self.m());
        let mut s = DMatrix::zeros(n, n + m);
        s.view_mut((0, 0), (n, n)).copy_from(&self.a);
        s.view_mut((0, n), (n, m)).copy_from(&self.b);
        s
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    /// Simulates from `x0` under the input columns of `inputs` (m x N).
    /// The returned trajectory records N + 1 states.
    pub fn simulate(&self, x0: &DVector<f64>, inputs: &DMatrix<f64>) -> Result<Trajectory> {
        if x0.len() != self.n() {
            return Err(Error::invalid(format!(
                "initial state has dimension {}, expected {}",
                x0.len(),
                self.n()
            )));
        }
        if inputs.nrows() != self.m() {
            return Err(Error::invalid(format!(
                "inputs have dimension {}, expected {}",
                inputs.nrows(),
                self.m()
            )));
        }
        let steps = inputs.ncols();
        let mut states = DMatrix::zeros(self.n(), steps + 1);
        states.set_column(0, x0);
        for k in 0..steps {
            let next = &self.a * states.column(k) + &self.b * inputs.column(k);
            states.set_column(k + 1, &next);
        }
        Trajectory::new(inputs.clone(), states)
    }

    /// `[B, AB, ..., A^{n-1} B]`.
    pub fn controllability_matrix(&self) -> DMatrix<f64> {
        let (n, m) = (self.n(), self.m());
        let mut c = DMatrix::zeros(n, n * m);
        let mut block = self.b.clone();
        for i in 0..n {
            c.view_mut((0, i * m), (n, m)).copy_from(&block);
            block = &self.a * block;
        }
        c
    }

    /// Dimension of the controllable subspace. Computed by orthogonal
    /// block-Krylov steps rather than from the raw controllability matrix,
    /// whose columns grow like `rho(A)^k` and swamp any rank threshold once
    /// n reaches a few dozen.
    pub fn controllability_rank(&self) -> usize {
        let n = self.n();
        let scale = numeric::spectral_norm(&self.a).max(numeric::spectral_norm(&self.b));
        if scale == 0.0 {
            return 0;
        }
        let tol = (n.max(self.m()) as f64) * f64::EPSILON * scale * 10.0;
        let mut basis = numeric::range_basis(&self.b, tol);
        let mut fresh = basis.clone();
        while basis.ncols() < n && fresh.ncols() > 0 {
            let mut w = &self.a * &fresh;
            for _ in 0..2 {
                let proj = basis.transpose() * &w;
                w -= &basis * proj;
            }
            fresh = numeric::range_basis(&w, tol);
            let k = basis.ncols();
            basis = basis.insert_columns(k, fresh.ncols(), 0.0);
            basis.columns_mut(k, fresh.ncols()).copy_from(&fresh);
        }
        basis.ncols().min(n)
    }

    pub fn is_controllable(&self) -> bool {
        self.controllability_rank() == self.n()
    }

    /// `A - B K`.
    pub fn closed_loop(&self, k: &Gain) -> Result<DMatrix<f64>> {
        let km = k.matrix();
        if km.nrows() != self.m() || km.ncols() != self.n() {
            return Err(Error::invalid(format!(
                "gain is {}x{}, expected {}x{}",
                km.nrows(),
                km.ncols(),
                self.m(),
                self.n()
            )));
        }
        Ok(&self.a - &self.b * km)
    }

    /// Spectral radius of `A - B K`; below one means `K` is stabilizing.
    pub fn closed_loop_radius(&self, k: &Gain) -> Result<f64> {
        numeric::spectral_radius(&self.closed_loop(k)?)
    }
}

/// Recorded inputs (m x N) and states (n x N or n x (N+1)).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    inputs: DMatrix<f64>,
    states: DMatrix<f64>,
}

impl Trajectory {
    pub fn new(inputs: DMatrix<f64>, states: DMatrix<f64>) -> Result<Self> {
        let (nu, nx) = (inputs.ncols(), states.ncols());
        if nx != nu && nx != nu + 1 {
            return Err(Error::invalid(format!(
                "trajectory holds {nu} inputs and {nx} states; need N or N+1 states"
            )));
        }
        if inputs.nrows() == 0 || states.nrows() == 0 {
            return Err(Error::invalid("trajectory vectors must be non-empty"));
        }
        Ok(Trajectory { inputs, states })
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    /// Number of input samples N.
    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.ncols() == 0
    }

    /// Whether the successor of the last input was recorded.
    pub fn has_terminal_state(&self) -> bool {
        self.states.ncols() == self.inputs.ncols() + 1
    }

    pub fn state_dim(&self) -> usize {
        self.states.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.nrows()
    }

    /// Number of complete `(x_k, u_k, x_{k+1})` triples.
    pub fn transition_count(&self) -> usize {
        self.states.ncols().saturating_sub(1).min(self.inputs.ncols())
    }

    pub(crate) fn with_states(&self, states: DMatrix<f64>) -> Trajectory {
        Trajectory {
            inputs: self.inputs.clone(),
            states,
        }
    }
}

/// Transition triples `(x_k, u_k, x_k^+)` stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Transitions {
    pub states: DMatrix<f64>,
    pub inputs: DMatrix<f64>,
    pub successors: DMatrix<f64>,
}

impl Transitions {
    pub fn len(&self) -> usize {
        self.states.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.states.ncols() == 0
    }

    pub fn truncated(&self, count: usize) -> Transitions {
        let count = count.min(self.len());
        Transitions {
            states: self.states.columns(0, count).into_owned(),
            inputs: self.inputs.columns(0, count).into_owned(),
            successors: self.successors.columns(0, count).into_owned(),
        }
    }
}

/// One excitation experiment: one or more contiguous trajectory segments.
/// A single segment is a single open-loop run; more segments arise when the
/// experiment is restarted from fresh initial states.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    segments: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(segments: Vec<Trajectory>) -> Result<Self> {
        let first = segments
            .first()
            .ok_or_else(|| Error::invalid("dataset needs at least one segment"))?;
        let (n, m) = (first.state_dim(), first.input_dim());
        if segments.iter().any(|s| s.state_dim() != n || s.input_dim() != m) {
            return Err(Error::invalid("dataset segments disagree on dimensions"));
        }
        Ok(Dataset { segments })
    }

    pub fn segments(&self) -> &[Trajectory] {
        &self.segments
    }

    pub fn state_dim(&self) -> usize {
        self.segments[0].state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.segments[0].input_dim()
    }

    pub fn transition_count(&self) -> usize {
        self.segments.iter().map(Trajectory::transition_count).sum()
    }

    /// All inputs concatenated in experiment order.
    pub fn inputs(&self) -> DMatrix<f64> {
        let total: usize = self.segments.iter().map(Trajectory::len).sum();
        let mut out = DMatrix::zeros(self.input_dim(), total);
        let mut col = 0;
        for s in &self.segments {
            out.columns_mut(col, s.len()).copy_from(s.inputs());
            col += s.len();
        }
        out
    }

    pub fn transitions(&self) -> Transitions {
        let (n, m) = (self.state_dim(), self.input_dim());
        let total = self.transition_count();
        let mut t = Transitions {
            states: DMatrix::zeros(n, total),
            inputs: DMatrix::zeros(m, total),
            successors: DMatrix::zeros(n, total),
        };
        let mut col = 0;
        for s in &self.segments {
            let c = s.transition_count();
            t.states.columns_mut(col, c).copy_from(&s.states().columns(0, c));
            t.inputs.columns_mut(col, c).copy_from(&s.inputs().columns(0, c));
            t.successors.columns_mut(col, c).copy_from(&s.states().columns(1, c));
            col += c;
        }
        t
    }

    pub(crate) fn map_segments(&self, f: impl FnMut(&Trajectory) -> Trajectory) -> Dataset {
        Dataset {
            segments: self.segments.iter().map(f).collect(),
        }
    }
}

impl From<Trajectory> for Dataset {
    fn from(t: Trajectory) -> Self {
        Dataset { segments: vec![t] }
    }
}
