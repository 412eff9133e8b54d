use thiserror::Error;

use crate::qlearn::RunDiagnostics;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("internal error: {0}")]
    Internal(String),

    /// The policy-evaluation regressor cannot be trusted. Either the data is
    /// not persistently exciting or the current gain is destabilizing.
    #[error("singular regressor at iteration {iteration} (condition estimate {condition:.3e})")]
    SingularRegressor { iteration: usize, condition: f64 },

    #[error("policy improvement failed at iteration {iteration}: input block of Q-kernel is singular")]
    Improvement { iteration: usize },

    #[error("no convergence within {iterations} iterations (last gain change {last_delta:.3e})")]
    NoConvergence {
        iterations: usize,
        last_delta: f64,
        diagnostics: Box<RunDiagnostics>,
    },

    #[error("rank deficiency: {0}")]
    Rank(String),

    #[error("uncontrollable pair: {0}")]
    Controllability(String),

    #[error("malformed canonical structure: {0}")]
    Structure(String),

    #[error("unsupported instance: {0}")]
    Unsupported(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("deadbeat design, {step}: {source}")]
    Deadbeat {
        step: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn at_step(self, step: &'static str) -> Self {
        Error::Deadbeat {
            step,
            source: Box::new(self),
        }
    }
}
