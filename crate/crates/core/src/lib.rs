//! Safety verification and controller synthesis for partially observable
//! discrete-time stochastic hybrid systems.
//!
//! The library computes guaranteed lower bounds on the probability that a
//! noisily observed switched-affine system stays inside a per-mode safe set
//! over a finite horizon, and extracts the policy achieving the bound. Two
//! interchangeable belief-space abstractions drive a point-based value
//! iteration engine:
//!
//! * [`finite_abstraction`] — grid the safe set, absorb everything else into
//!   an unsafe aggregate, and run vector backups;
//! * [`gm_abstraction`] — approximate the safe-set indicator with Gaussian
//!   radial basis functions so beliefs and α-functions stay closed-form
//!   Gaussian mixtures.
//!
//! [`bounds`] turns grid resolutions and fit errors into explicit error
//! constants, and [`simulate`] provides an independent Monte-Carlo check of
//! any extracted policy.

pub mod bounds;
pub mod finite_abstraction;
pub mod gaussian;
pub mod gm_abstraction;
pub mod model;
pub mod pbvi;
pub mod simulate;

pub(crate) mod nnls;

use thiserror::Error as ThisError;

/// Library error type.
#[derive(Debug, ThisError)]
pub enum Error {
    /// A precondition of an operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A model configuration failed validation; `path` points at the field.
    #[error("invalid model config at `{path}`: {message}")]
    Config { path: String, message: String },

    /// An observation made the filtered belief collapse below representable
    /// mass; callers resample or abort the trial.
    #[error("degenerate observation: belief likelihood below 1e-300")]
    DegenerateObservation,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { path: path.into(), message: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
