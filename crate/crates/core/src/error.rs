use thiserror::Error;

use crate::constraints::ConstraintKind;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("elapsed time must be nonnegative, got {0}")]
    NegativeTime(f64),

    #[error("euler-rate jacobian is singular at pitch {pitch} rad")]
    Singularity { pitch: f64 },

    #[error("singular configuration reached at t = {time} (pitch {pitch} rad)")]
    SingularTrajectory { time: f64, pitch: f64 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("linearization is not stabilizable: mode {eigenvalue} is uncontrollable (direction {direction:?})")]
    Unstabilizable { eigenvalue: String, direction: Vec<f64> },

    #[error("missing prediction for agent {agent} required by agent {requester}")]
    Protocol { agent: usize, requester: usize },

    #[error("rollout diverged at stage {stage}: {detail}")]
    Divergence { stage: usize, detail: String },

    #[error("agent {agent} infeasible at t = {time}: worst {kind} margin {margin:.6}")]
    Infeasible {
        agent: usize,
        time: f64,
        kind: ConstraintKind,
        margin: f64,
    },

    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
