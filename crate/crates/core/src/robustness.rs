//! Learning from noisy state measurements `chi_k = x_k + w_k`: the noisy
//! learner, the perturbation identities and the computable stability
//! margins.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use serde::Serialize;

use crate::deadbeat;
use crate::error::{Error, Result};
use crate::excitation::SamplingPlan;
use crate::linops::quad_monomials;
use crate::numeric;
use crate::oracle::{self, kbar, CostWeights};
use crate::qlearn::{self, Gain, LearningData, QLearnRun, QTheta, StopRule};
use crate::systems::{seeded_rng, Dataset, LinearSystem};

/// Clean experiment, its noisy measurement and the noise itself. The noise
/// is kept only so that tests can evaluate the perturbation identities.
#[derive(Debug, Clone)]
pub struct NoisyData {
    clean: Dataset,
    measured: Dataset,
    noise: Vec<DMatrix<f64>>,
    w_max: f64,
}

/// Perturbs every recorded state by independent uniform noise in
/// `[-w_max, w_max]` per component. Inputs are untouched and `w_max = 0`
/// leaves the data bit-for-bit unchanged.
pub fn add_noise(ds: &Dataset, w_max: f64, seed: u64) -> Result<NoisyData> {
    if !(w_max >= 0.0 && w_max.is_finite()) {
        return Err(Error::invalid("noise bound must be finite and non-negative"));
    }
    let mut rng = seeded_rng(seed, 2);
    let mut noise = Vec::with_capacity(ds.segments().len());
    let measured = ds.map_segments(|seg| {
        let (n, len) = seg.states().shape();
        if w_max == 0.0 {
            noise.push(DMatrix::zeros(n, len));
            return seg.clone();
        }
        let w = DMatrix::from_fn(n, len, |_, _| rng.random_range(-w_max..=w_max));
        let states = seg.states() + &w;
        noise.push(w);
        seg.with_states(states)
    });
    Ok(NoisyData {
        clean: ds.clone(),
        measured,
        noise,
        w_max,
    })
}

impl NoisyData {
    pub fn clean(&self) -> &Dataset {
        &self.clean
    }

    pub fn measured(&self) -> &Dataset {
        &self.measured
    }

    /// Noise per segment, aligned with that segment's states.
    pub fn noise(&self) -> &[DMatrix<f64>] {
        &self.noise
    }

    pub fn w_max(&self) -> f64 {
        self.w_max
    }

    /// Learning data built from the measurements.
    pub fn learning_data(&self) -> Result<LearningData> {
        LearningData::from_dataset(&self.measured)
    }

    /// `w_bar_k = w_{k+1} - A w_k` for every transition, in the order of
    /// [`Dataset::transitions`]. Needs the true `A`.
    pub fn transition_increments(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = self.clean.state_dim();
        let mut out = DMatrix::zeros(n, self.clean.transition_count());
        let mut col = 0;
        for (seg, w) in self.clean.segments().iter().zip(&self.noise) {
            let count = seg.transition_count();
            let inc = noise_increments(&w.columns(0, count + 1).into_owned(), a)?;
            out.columns_mut(col, count).copy_from(&inc);
            col += count;
        }
        Ok(out)
    }

    /// Noise `w_k` on the current state of every transition.
    pub fn transition_noise(&self) -> DMatrix<f64> {
        let n = self.clean.state_dim();
        let mut out = DMatrix::zeros(n, self.clean.transition_count());
        let mut col = 0;
        for (seg, w) in self.clean.segments().iter().zip(&self.noise) {
            let count = seg.transition_count();
            out.columns_mut(col, count).copy_from(&w.columns(0, count));
            col += count;
        }
        out
    }
}

/// The learner of [`qlearn::run_qlearning`] fed with measured states.
pub fn run_qlearning_noisy(
    data: &NoisyData,
    k0: &Gain,
    w: &CostWeights,
    stop: StopRule,
    audit: Option<&LinearSystem>,
) -> Result<QLearnRun> {
    qlearn::run_qlearning(&data.learning_data()?, k0, w, stop, audit)
}

/// `w_bar_k = w_{k+1} - A w_k` for `k = 0 .. len - 2`; `w` is n x len.
pub fn noise_increments(w: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = w.nrows();
    if a.shape() != (n, n) {
        return Err(Error::invalid("A does not match the noise dimension"));
    }
    if w.ncols() < 2 {
        return Ok(DMatrix::zeros(n, 0));
    }
    let len = w.ncols() - 1;
    Ok(w.columns(1, len) - a * w.columns(0, len))
}

/// `eps = w_bar' Kbar' Theta Kbar w_bar + 2 z_hat' S' Kbar' Theta Kbar w_bar`.
pub fn epsilon_term(
    theta_hat: &QTheta,
    k: &Gain,
    z_hat: &DVector<f64>,
    wbar: &DVector<f64>,
    s: &DMatrix<f64>,
) -> Result<f64> {
    let kb = kbar(k);
    let d = kb.nrows();
    if theta_hat.matrix().nrows() != d || z_hat.len() != d || wbar.len() != kb.ncols() || s.shape() != (kb.ncols(), d)
    {
        return Err(Error::invalid("operand dimensions disagree"));
    }
    let t = theta_hat.matrix() * (&kb * wbar);
    let kw = &kb * wbar;
    Ok(kw.dot(&t) + 2.0 * (&kb * (s * z_hat)).dot(&t))
}

/// Left-hand side of a margin condition and whether it is below
/// `lambda_min(Qbar)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Margin {
    pub lhs: f64,
    pub ok: bool,
}

/// `sqrt(eta) ||V_hat^{-1}||_2`, with `V_hat` the eta x eta matrix whose
/// columns are the monomials of the measured regression samples.
fn monomial_inverse_factor(data: &LearningData) -> Result<f64> {
    let eta = data.eta();
    let mut v = DMatrix::zeros(eta, eta);
    for k in 0..eta {
        v.set_column(k, &quad_monomials(&data.z().column(k).into_owned()));
    }
    let sv = numeric::singular_values(&v);
    let (smin, smax) = (sv.min(), sv.max());
    let tol = numeric::rank_tolerance(&v, smax);
    if smin <= tol {
        return Err(Error::SingularRegressor {
            iteration: 0,
            condition: if smin > 0.0 { smax / smin } else { f64::INFINITY },
        });
    }
    Ok((eta as f64).sqrt() / smin)
}

fn margin_sum(data: &LearningData, wbar_bounds: &[f64], s_norm: f64, quad: f64, cross: f64) -> Result<f64> {
    let eta = data.eta();
    if wbar_bounds.len() < eta {
        return Err(Error::invalid(format!(
            "need {eta} noise-increment bounds, got {}",
            wbar_bounds.len()
        )));
    }
    let sum: f64 = (0..eta)
        .map(|k| {
            let wb = wbar_bounds[k];
            let z = data.z().column(k).norm();
            quad * wb * wb + 2.0 * s_norm * cross * z * wb
        })
        .sum();
    Ok(monomial_inverse_factor(data)? * sum)
}

/// Sufficient condition for the gain improved from `theta_hat` to
/// stabilize the plant; `k` is the gain `theta_hat` was evaluated for.
/// Sums over the eta regression samples.
pub fn stability_margin(
    data: &LearningData,
    theta_hat: &QTheta,
    k: &Gain,
    s_norm_bound: f64,
    wbar_bounds: &[f64],
    w: &CostWeights,
) -> Result<Margin> {
    let t = numeric::spectral_norm(theta_hat.matrix());
    let kb = numeric::spectral_norm(&kbar(k)).powi(2);
    let lhs = margin_sum(data, wbar_bounds, s_norm_bound, t * kb, t * kb)?;
    let bound = numeric::min_eigenvalue(w.qbar());
    Ok(Margin { lhs, ok: lhs < bound })
}

/// Gain-free variant using `||Theta_hat^1||_2^2`; requires `Qbar > I`.
pub fn stability_margin_refined(
    data: &LearningData,
    theta_hat_1: &QTheta,
    s_norm_bound: f64,
    wbar_bounds: &[f64],
    w: &CostWeights,
) -> Result<Margin> {
    let bound = numeric::min_eigenvalue(w.qbar());
    if bound <= 1.0 {
        return Err(Error::Precondition(format!(
            "refined margin needs Qbar > I, smallest eigenvalue is {bound}"
        )));
    }
    let t2 = numeric::spectral_norm(theta_hat_1.matrix()).powi(2);
    let lhs = margin_sum(data, wbar_bounds, s_norm_bound, t2, t2)?;
    Ok(Margin { lhs, ok: lhs < bound })
}

/// Conservative `||w_bar_k||_2` bound for componentwise noise bounded by
/// `w_max`: `(1 + ||A||_2) sqrt(n) w_max`.
pub fn default_wbar_bound(a_norm_bound: f64, n: usize, w_max: f64) -> f64 {
    (1.0 + a_norm_bound) * (n as f64).sqrt() * w_max
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisyConfig {
    pub n: usize,
    pub m: usize,
    pub w_max: f64,
    pub trials: usize,
    pub iterations: usize,
    pub seed: u64,
    pub plan: SamplingPlan,
}

impl Default for NoisyConfig {
    fn default() -> Self {
        NoisyConfig {
            n: 5,
            m: 2,
            w_max: 1e-3,
            trials: 100,
            iterations: 10,
            seed: 0,
            plan: SamplingPlan::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub seed: u64,
    pub error_norm: f64,
    pub stabilizing: bool,
    pub margin_lhs: f64,
    pub margin_ok: bool,
    /// Why the trial produced no gain, if it failed.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoisyStats {
    pub mean_error: f64,
    pub max_error: f64,
    pub destabilized_count: usize,
    pub failed_count: usize,
    pub per_trial: Vec<TrialOutcome>,
}

/// Seed of trial `trial` derived from the experiment seed, independent of
/// the order in which trials run.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    seeded_rng(seed, trial as u64 + 1).next_u64()
}

/// One trial: fresh random plant, oracle gain, noisy experiment, deadbeat
/// start from the measurements and a fixed number of noisy iterations.
pub fn noisy_trial(cfg: &NoisyConfig, trial: usize) -> TrialOutcome {
    let seed = trial_seed(cfg.seed, trial);
    let mut outcome = TrialOutcome {
        trial,
        seed,
        error_norm: f64::NAN,
        stabilizing: false,
        margin_lhs: f64::NAN,
        margin_ok: false,
        failure: None,
    };
    if let Err(e) = run_trial(cfg, seed, &mut outcome) {
        outcome.failure = Some(e.to_string());
    }
    outcome
}

fn run_trial(cfg: &NoisyConfig, seed: u64, out: &mut TrialOutcome) -> Result<()> {
    let sys = LinearSystem::random_controllable(cfg.n, cfg.m, seed)?;
    let w = CostWeights::identity(cfg.n, cfg.m);
    let p = oracle::solve_dare(&sys, &w, oracle::DARE_TOL, oracle::DARE_MAX_ITER)?;
    let k_star = oracle::lqr_gain(&sys, &w, &p)?;
    let ds = qlearn::collect_experiment(&sys, &DVector::zeros(cfg.n), seed, cfg.plan)?;
    let noisy = add_noise(&ds, cfg.w_max, seed)?;
    let data = noisy.learning_data()?;
    let k0 = deadbeat::deadbeat_from_learning_data(&data)?;
    let run = qlearn::run_qlearning(&data, &k0, &w, StopRule::Fixed(cfg.iterations), None)?;
    out.error_norm = run.gain.distance(&k_star);
    out.stabilizing = sys.closed_loop_radius(&run.gain)? < 1.0;

    let s_norm = numeric::spectral_norm(&sys.stacked());
    let bound = default_wbar_bound(s_norm, cfg.n, cfg.w_max);
    let bounds = vec![bound; data.eta()];
    let (theta, _) = run.history.last().expect("at least one iteration");
    let k_prev = match run.history.len() {
        1 => &k0,
        len => &run.history[len - 2].1,
    };
    let margin = stability_margin(&data, theta, k_prev, s_norm, &bounds, &w)?;
    out.margin_lhs = margin.lhs;
    out.margin_ok = margin.ok;
    Ok(())
}

/// Aggregates trial outcomes. Failed trials are excluded from the error
/// statistics and counted separately.
pub fn summarize(per_trial: Vec<TrialOutcome>) -> NoisyStats {
    let ok: Vec<&TrialOutcome> = per_trial.iter().filter(|t| t.failure.is_none()).collect();
    let mean_error = if ok.is_empty() {
        f64::NAN
    } else {
        ok.iter().map(|t| t.error_norm).sum::<f64>() / ok.len() as f64
    };
    NoisyStats {
        mean_error,
        max_error: ok.iter().map(|t| t.error_norm).fold(f64::NAN, f64::max),
        destabilized_count: ok.iter().filter(|t| !t.stabilizing).count(),
        failed_count: per_trial.len() - ok.len(),
        per_trial,
    }
}

pub fn noisy_experiment(cfg: &NoisyConfig) -> Result<NoisyStats> {
    if cfg.n == 0 || cfg.m == 0 || cfg.trials == 0 || cfg.iterations == 0 {
        return Err(Error::invalid("dimensions, trials and iterations must be positive"));
    }
    if !(cfg.w_max >= 0.0) {
        return Err(Error::invalid("noise bound must be non-negative"));
    }
    Ok(summarize((0..cfg.trials).map(|t| noisy_trial(cfg, t)).collect()))
}
