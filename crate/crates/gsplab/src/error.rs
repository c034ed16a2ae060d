//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A shown slot carries a zero quality score, so the second-price ratio
    /// is undefined.
    #[error("degenerate quality score for advertiser {advertiser} at slot {slot}")]
    DegenerateScore { advertiser: usize, slot: usize },

    /// The joint bid state space exceeds the configured enumeration cap.
    #[error("joint state space has {states} states, above the cap of {cap}")]
    StateSpaceTooLarge { states: u128, cap: usize },

    /// Power iteration failed to reach the residual tolerance; the kernel is
    /// not ergodic enough (or not stochastic).
    #[error("stationary distribution did not converge: L1 residual {residual:.3e} after {iterations} iterations")]
    NonErgodic { residual: f64, iterations: usize },

    /// Gradient descent diverged (loss increased for too many consecutive
    /// steps); the learning rate is too large for the data.
    #[error("gradient descent diverged at iteration {iteration} (loss {loss:.6e})")]
    StepSize { iteration: usize, loss: f64 },

    /// A data file (log, model, trajectory) failed to parse.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A configuration or scenario file is malformed or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
