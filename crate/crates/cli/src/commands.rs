use std::fmt::Write as _;
use std::fs;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use ddlqr::bench::{clean_trial, summarize_bench};
use ddlqr::deadbeat::{deadbeat_from_data, deadbeat_from_learning_data};
use ddlqr::excitation::{check_willems_rank, is_persistently_exciting, min_pe_length};
use ddlqr::io::{fmt_f64, parse_data, parse_system, parse_weights};
use ddlqr::numeric::{spectral_norm, spectral_radius};
use ddlqr::oracle::{lqr_gain, solve_dare, DARE_MAX_ITER, DARE_TOL};
use ddlqr::qlearn::{collect_experiment, run_qlearning, LearningData, QLearnReport};
use ddlqr::robustness::{noisy_trial, summarize, trial_seed, NoisyConfig};
use ddlqr::{CostWeights, LinearSystem, SamplingPlan, StopRule, Trajectory};

use crate::output::{csv_bool, matrix_lines, to_json};
use crate::{BenchArgs, DeadbeatArgs, NoisyArgs, PeCheckArgs, SolveArgs};

pub const EXIT_VERDICT: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

/// Deadbeat closed-loop eigenvalue bound used by the audit.
const DEADBEAT_EIG_TOL: f64 = 1e-6;

pub struct CliError {
    pub code: u8,
    pub message: String,
}

type CliResult = Result<u8, CliError>;

fn usage(message: impl Into<String>) -> CliError {
    CliError { code: EXIT_USAGE, message: message.into() }
}

fn failure(context: &str, e: impl std::fmt::Display) -> CliError {
    CliError { code: EXIT_VERDICT, message: format!("{context}: {e}") }
}

fn read(path: &str) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| usage(format!("cannot read {path}: {e}")))
}

fn load<T>(path: &str, parse: impl Fn(&str) -> ddlqr::Result<T>) -> Result<T, CliError> {
    parse(&read(path)?).map_err(|e| usage(format!("{path}: {e}")))
}

fn write_out(path: &str, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| failure(&format!("cannot write {path}"), e))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| failure("worker pool", e))
}

#[derive(Serialize)]
struct Audit {
    oracle_gain: Vec<Vec<f64>>,
    error_vs_oracle: f64,
    final_closed_loop_radius: f64,
}

#[derive(Serialize)]
struct SolveReport {
    #[serde(flatten)]
    report: QLearnReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    audit: Option<Audit>,
}

pub fn solve(a: &SolveArgs) -> CliResult {
    let sys = load(&a.system, parse_system)?;
    let w = match &a.weights {
        Some(path) => load(path, parse_weights)?,
        None => CostWeights::identity(sys.n(), sys.m()),
    };
    if (w.n(), w.m()) != (sys.n(), sys.m()) {
        return Err(usage(format!(
            "weights are {}x{} but the system is {}x{}",
            w.n(),
            w.m(),
            sys.n(),
            sys.m()
        )));
    }
    let stop = match a.iterations {
        Some(0) => return Err(usage("--iterations must be positive")),
        Some(n) => StopRule::Fixed(n),
        None => StopRule::Tolerance { eps: a.eps, max_iter: a.max_iter },
    };
    let plan = if a.single_run { SamplingPlan::SingleRun } else { SamplingPlan::default() };
    let ds = collect_experiment(&sys, &DVector::zeros(sys.n()), a.seed, plan).map_err(|e| failure("data collection", e))?;
    let data = LearningData::from_dataset(&ds).map_err(|e| failure("data collection", e))?;
    let k0 = deadbeat_from_learning_data(&data).map_err(|e| failure("initial gain", e))?;
    let run = run_qlearning(&data, &k0, &w, stop, a.audit.then_some(&sys)).map_err(|e| failure("q-learning", e))?;
    println!("{}", matrix_lines(run.gain.matrix()));

    let audit = if a.audit {
        let p = solve_dare(&sys, &w, DARE_TOL, DARE_MAX_ITER).map_err(|e| failure("audit oracle", e))?;
        let k_star = lqr_gain(&sys, &w, &p).map_err(|e| failure("audit oracle", e))?;
        let audit = Audit {
            oracle_gain: ddlqr::numeric::rows_of(k_star.matrix()),
            error_vs_oracle: run.gain.distance(&k_star),
            final_closed_loop_radius: sys.closed_loop_radius(&run.gain).map_err(|e| failure("audit", e))?,
        };
        eprintln!(
            "audit: |K - K*| = {}, closed-loop radius {}",
            fmt_f64(audit.error_vs_oracle),
            fmt_f64(audit.final_closed_loop_radius)
        );
        Some(audit)
    } else {
        None
    };
    if let Some(path) = &a.out {
        let report = SolveReport { report: run.report(), audit };
        write_out(path, &(to_json(&report).map_err(|e| failure("report", e))? + "\n"))?;
    }
    Ok(0)
}

pub fn bench(a: &BenchArgs) -> CliResult {
    if a.trials == 0 || a.iterations == 0 || a.m == 0 || a.dims.iter().any(|&n| n == 0) {
        return Err(usage("dimensions, trials and iterations must be positive"));
    }
    let pool = pool(a.jobs)?;
    let mut csv = String::from("n,trials,avg_error,avg_time_seconds,failures\n");
    for &n in &a.dims {
        let outcomes: Vec<_> = pool.install(|| {
            (0..a.trials)
                .into_par_iter()
                .map(|t| clean_trial(n, a.m, trial_seed(a.seed, t), a.iterations, SamplingPlan::default(), false))
                .collect()
        });
        let row = summarize_bench(n, &outcomes);
        log::info!("n = {n}: {} failures", row.failures);
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            row.n,
            row.trials,
            fmt_f64(row.avg_error),
            fmt_f64(row.avg_time_seconds),
            row.failures
        );
    }
    match &a.out {
        Some(path) => write_out(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(0)
}

pub fn noisy(a: &NoisyArgs) -> CliResult {
    if a.n == 0 || a.m == 0 || a.trials == 0 || a.iterations == 0 {
        return Err(usage("dimensions, trials and iterations must be positive"));
    }
    if !(a.w_max >= 0.0 && a.w_max.is_finite()) {
        return Err(usage("--w-max must be finite and non-negative"));
    }
    let cfg = NoisyConfig {
        n: a.n,
        m: a.m,
        w_max: a.w_max,
        trials: a.trials,
        iterations: a.iterations,
        seed: a.seed,
        plan: SamplingPlan::default(),
    };
    let per_trial = pool(a.jobs)?.install(|| (0..a.trials).into_par_iter().map(|t| noisy_trial(&cfg, t)).collect());
    let stats = summarize(per_trial);
    let mut csv = String::from("trial,seed,error_norm,stabilizing,margin_lhs,margin_ok\n");
    for t in &stats.per_trial {
        if let Some(reason) = &t.failure {
            log::warn!("trial {}: {reason}", t.trial);
        }
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            t.trial,
            t.seed,
            fmt_f64(t.error_norm),
            csv_bool(t.stabilizing),
            fmt_f64(t.margin_lhs),
            csv_bool(t.margin_ok)
        );
    }
    let summary = format!(
        "mean_error={} max_error={} destabilized={} failed={} trials={}",
        fmt_f64(stats.mean_error),
        fmt_f64(stats.max_error),
        stats.destabilized_count,
        stats.failed_count,
        a.trials
    );
    match &a.out {
        Some(path) => {
            write_out(path, &csv)?;
            println!("{summary}");
        }
        None => {
            print!("{csv}");
            eprintln!("{summary}");
        }
    }
    Ok(0)
}

pub fn pe_check(a: &PeCheckArgs) -> CliResult {
    if a.order == 0 {
        return Err(usage("--order must be at least 1"));
    }
    let traj = load(&a.data, parse_data)?;
    let (n, m, len) = (traj.state_dim(), traj.input_dim(), traj.len());
    let needed = min_pe_length(m, a.order);
    if len < needed {
        println!("NOT persistently exciting: order {} needs N >= (m+1)L-1 = {needed} samples, the file has N = {len}", a.order);
        return Ok(EXIT_VERDICT);
    }
    let pe = is_persistently_exciting(traj.inputs(), a.order).map_err(|e| failure("excitation check", e))?;
    println!(
        "input is {}persistently exciting of order {}",
        if pe { "" } else { "NOT " },
        a.order
    );
    let rank_ok = willems_check(&traj, a.order, n, m)?;
    Ok(if pe && rank_ok { 0 } else { EXIT_VERDICT })
}

/// Rank of `[H_1(x); H_L(u)]` against `L m + n`, if the data is long enough.
fn willems_check(traj: &Trajectory, depth: usize, n: usize, m: usize) -> Result<bool, CliError> {
    let expected = depth * m + n;
    if traj.len() < depth || traj.len() + 1 - depth < expected {
        println!("rank check: too few samples for rank {expected} at depth {depth}");
        return Ok(false);
    }
    let ok = check_willems_rank(traj, depth).map_err(|e| failure("rank check", e))?;
    println!("rank check [H_1(x); H_{depth}(u)] = {expected}: {}", if ok { "pass" } else { "FAIL" });
    Ok(ok)
}

pub fn deadbeat(a: &DeadbeatArgs) -> CliResult {
    let sys: Option<LinearSystem> = a.system.as_deref().map(|p| load(p, parse_system)).transpose()?;
    let gain = match (&a.data, &sys) {
        (Some(path), _) => {
            let traj = load(path, parse_data)?;
            if let Some(s) = &sys {
                if (s.n(), s.m()) != (traj.state_dim(), traj.input_dim()) {
                    return Err(usage("data and system dimensions differ"));
                }
            }
            deadbeat_from_data(&traj).map_err(|e| failure("deadbeat", e))?
        }
        (None, Some(s)) => {
            let ds = collect_experiment(s, &DVector::zeros(s.n()), a.seed, SamplingPlan::default())
                .map_err(|e| failure("data collection", e))?;
            let data = LearningData::from_dataset(&ds).map_err(|e| failure("data collection", e))?;
            deadbeat_from_learning_data(&data).map_err(|e| failure("deadbeat", e))?
        }
        (None, None) => return Err(usage("either --system or --data is required")),
    };
    println!("{}", matrix_lines(gain.matrix()));
    if !a.audit {
        return Ok(0);
    }
    let s = sys.as_ref().expect("clap enforces --system with --audit");
    let cl = s.closed_loop(&gain).map_err(|e| failure("audit", e))?;
    let radius = spectral_radius(&cl).map_err(|e| failure("audit", e))?;
    let mut power = cl.clone();
    for _ in 1..s.n() {
        power = &cl * power;
    }
    let contraction = spectral_norm(&power);
    let ok = radius <= DEADBEAT_EIG_TOL;
    println!(
        "audit: max |eig(A - B K_db)| = {} ({}), ||(A - B K_db)^n|| = {}",
        fmt_f64(radius),
        if ok { "pass" } else { "FAIL" },
        fmt_f64(contraction)
    );
    Ok(if ok { 0 } else { EXIT_VERDICT })
}
