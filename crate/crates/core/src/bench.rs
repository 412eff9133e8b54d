//! Clean benchmark: random plant, deadbeat start from data, fixed number of
//! learning iterations, error against the Riccati oracle.

use nalgebra::DVector;
use serde::Serialize;

use crate::deadbeat;
use crate::error::{Error, Result};
use crate::excitation::SamplingPlan;
use crate::oracle::{self, CostWeights};
use crate::qlearn::{self, LearningData, QLearnRun, StopRule};
use crate::robustness::trial_seed;
use crate::systems::LinearSystem;

#[derive(Debug, Clone)]
pub struct CleanTrial {
    pub system: LinearSystem,
    pub run: QLearnRun,
    pub k_star: crate::Gain,
    pub error_norm: f64,
}

/// One trial on `LinearSystem::random_controllable(n, m, seed)`. Timing in
/// the returned run covers the learning loop only.
pub fn clean_trial(n: usize, m: usize, seed: u64, iterations: usize, plan: SamplingPlan, audit: bool) -> Result<CleanTrial> {
    let system = LinearSystem::random_controllable(n, m, seed)?;
    let w = CostWeights::identity(n, m);
    let ds = qlearn::collect_experiment(&system, &DVector::zeros(n), seed, plan)?;
    let data = LearningData::from_dataset(&ds)?;
    let k0 = deadbeat::deadbeat_from_learning_data(&data)?;
    let run = qlearn::run_qlearning(&data, &k0, &w, StopRule::Fixed(iterations), audit.then_some(&system))?;
    let p = oracle::solve_dare(&system, &w, oracle::DARE_TOL, oracle::DARE_MAX_ITER)?;
    let k_star = oracle::lqr_gain(&system, &w, &p)?;
    let error_norm = run.gain.distance(&k_star);
    Ok(CleanTrial { system, run, k_star, error_norm })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub trials: usize,
    pub avg_error: f64,
    pub avg_time_seconds: f64,
    pub failures: usize,
}

/// Averages over the successful trials; failed ones are logged and counted.
pub fn bench_dimension(n: usize, m: usize, trials: usize, seed: u64, iterations: usize) -> Result<BenchRow> {
    if trials == 0 {
        return Err(Error::invalid("at least one trial is required"));
    }
    let outcomes: Vec<_> = (0..trials)
        .map(|t| clean_trial(n, m, trial_seed(seed, t), iterations, SamplingPlan::default(), false))
        .collect();
    Ok(summarize_bench(n, &outcomes))
}

pub fn summarize_bench(n: usize, outcomes: &[Result<CleanTrial>]) -> BenchRow {
    let (mut err, mut time, mut ok) = (0.0, 0.0, 0usize);
    for (t, o) in outcomes.iter().enumerate() {
        match o {
            Ok(trial) => {
                err += trial.error_norm;
                time += trial.run.wall_time_seconds;
                ok += 1;
            }
            Err(e) => log::warn!("n = {n}, trial {t}: {e}"),
        }
    }
    let avg = |s: f64| if ok == 0 { f64::NAN } else { s / ok as f64 };
    BenchRow {
        n,
        trials: outcomes.len(),
        avg_error: avg(err),
        avg_time_seconds: avg(time),
        failures: outcomes.len() - ok,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_bench_is_accurate() {
        let row = bench_dimension(3, 2, 5, 1, 10).unwrap();
        assert_eq!(row.failures, 0);
        assert!(row.avg_error <= 1e-10, "{}", row.avg_error);
        assert!(row.avg_time_seconds > 0.0);
        assert_eq!(bench_dimension(3, 2, 5, 1, 10).unwrap().avg_error, row.avg_error);
        assert!(bench_dimension(3, 2, 0, 1, 10).is_err());
    }

    #[test]
    fn failures_are_counted_not_averaged() {
        let bad: Vec<Result<CleanTrial>> = vec![Err(Error::invalid("x"))];
        let row = summarize_bench(3, &bad);
        assert_eq!(row.failures, 1);
        assert!(row.avg_error.is_nan());
    }
}
