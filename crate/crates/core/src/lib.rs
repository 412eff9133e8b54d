//! Data-driven LQR: off-policy Q-learning from one batch of persistently
//! exciting data, a data-driven deadbeat initializer, and the model-based
//! oracles used to check them.

pub mod bench;
pub mod deadbeat;
pub mod error;
pub mod excitation;
pub mod io;
pub mod linops;
pub mod numeric;
pub mod oracle;
pub mod qlearn;
pub mod robustness;
pub mod systems;

pub use error::{Error, Result};
pub use excitation::SamplingPlan;
pub use oracle::CostWeights;
pub use qlearn::{Gain, QTheta, StopRule};
pub use systems::{Dataset, LinearSystem, Trajectory};
