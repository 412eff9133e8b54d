//! `ddlqr`: run the data-driven LQR pipeline and its experiments.

mod commands;
mod output;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ddlqr", version, about = "Data-driven LQR by off-policy Q-learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn the LQR gain of a plant from its own excitation experiment.
    Solve(SolveArgs),
    /// Clean benchmark over random plants; writes a CSV table.
    Bench(BenchArgs),
    /// Noisy-measurement study; writes per-trial CSV and a summary line.
    Noisy(NoisyArgs),
    /// Persistent-excitation and rank checks for a data file.
    PeCheck(PeCheckArgs),
    /// Deadbeat gain from data.
    Deadbeat(DeadbeatArgs),
}

#[derive(Args)]
pub struct SolveArgs {
    /// System file: "n m", n rows of A, n rows of B.
    pub system: String,
    /// Weights file: "n m", n rows of Q, m rows of R. Default Q = I, R = I.
    #[arg(long)]
    pub weights: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run exactly this many iterations instead of stopping on --eps.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Stop once the gain changes by at most this much.
    #[arg(long, default_value_t = ddlqr::qlearn::DEFAULT_EPS)]
    pub eps: f64,
    /// Iteration cap for --eps.
    #[arg(long, default_value_t = ddlqr::qlearn::DEFAULT_MAX_ITER)]
    pub max_iter: usize,
    /// Record one open-loop run from x0 = 0 instead of restarting per sample.
    #[arg(long)]
    pub single_run: bool,
    /// JSON report path.
    #[arg(long)]
    pub out: Option<String>,
    /// Use the true plant for diagnostics: closed-loop radius per iteration
    /// and the error against the Riccati solution.
    #[arg(long)]
    pub audit: bool,
}

#[derive(Args)]
pub struct BenchArgs {
    /// Comma-separated state dimensions.
    #[arg(long, value_delimiter = ',', default_values_t = [3usize, 5, 10, 20, 50])]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    pub m: usize,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub iterations: usize,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// CSV path; stdout if absent.
    #[arg(long)]
    pub out: Option<String>,
}

#[derive(Args)]
pub struct NoisyArgs {
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub m: usize,
    /// Componentwise noise bound.
    #[arg(long, default_value_t = 1e-3)]
    pub w_max: f64,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub iterations: usize,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Per-trial CSV path; stdout if absent.
    #[arg(long)]
    pub out: Option<String>,
}

#[derive(Args)]
pub struct PeCheckArgs {
    /// Data file: "n m N", then N rows of u_k followed by x_k.
    pub data: String,
    #[arg(long)]
    pub order: usize,
}

#[derive(Args)]
pub struct DeadbeatArgs {
    /// Plant to excite; with --data it is only used by --audit.
    #[arg(long, required_unless_present = "data")]
    pub system: Option<String>,
    /// Recorded data to design from.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Check the closed-loop spectrum against the plant.
    #[arg(long, requires = "system")]
    pub audit: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DDLQR_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { commands::EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Solve(a) => commands::solve(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Noisy(a) => commands::noisy(&a),
        Command::PeCheck(a) => commands::pe_check(&a),
        Command::Deadbeat(a) => commands::deadbeat(&a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
