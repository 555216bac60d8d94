//! Error type shared across the library.
//!
//! Every failure mode that the operations can report is a variant here, so
//! both library callers and the CLI (which maps variants onto machine-readable
//! error kinds and exit codes) can match on them.

use thiserror::Error;

/// Library-wide error enum.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition (dimension mismatch,
    /// parameter out of range, empty input, ...).
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A parameter or state entry was NaN or infinite where finiteness is
    /// required.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    /// The step-size guard `h * Lambda < 1/2` failed.
    #[error("step-size guard violated: h*Lambda = {product:.6e} >= 1/2 (h = {h:.6e}, Lambda = {lambda:.6e})")]
    GuardViolation {
        /// Step size in use.
        h: f64,
        /// Lipschitz bound used by the guard.
        lambda: f64,
        /// Their product.
        product: f64,
    },

    /// Step doubling during training hit the hard cap without restoring the
    /// guard.
    #[error("guard unrecoverable: step count would exceed {max_m} (guard constant {lambda:.6e})")]
    GuardUnrecoverable {
        /// Hard cap on the number of steps.
        max_m: usize,
        /// Guard constant (measured or formula-bound) that forced the
        /// doubling.
        lambda: f64,
    },

    /// The fixed-point iteration used to invert one integrator step did not
    /// contract to tolerance.
    #[error("fixed-point inversion did not converge after {iterations} iterations (last update {last_delta:.3e}, tolerance {tolerance:.1e})")]
    FixedPointDiverged {
        /// Number of iterations performed before giving up.
        iterations: usize,
        /// Norm of the final update (NaN if the iterate became non-finite).
        last_delta: f64,
        /// Convergence tolerance that was requested.
        tolerance: f64,
    },

    /// Adaptive quadrature exhausted its subdivision depth before reaching
    /// the requested tolerance.
    #[error("quadrature did not reach tolerance {tolerance:.1e} on [{a}, {b}]")]
    QuadratureFailed {
        /// Left endpoint of the failing interval.
        a: f64,
        /// Right endpoint of the failing interval.
        b: f64,
        /// Absolute tolerance that was requested.
        tolerance: f64,
    },

    /// A data point handed to the density model lies outside the open ball.
    #[error("point outside the model domain: |x| = {radius:.6e} >= 1/2")]
    OutsideDomain {
        /// Euclidean norm of the offending point.
        radius: f64,
    },

    /// Wrapper for I/O failures when reading or writing artifacts.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Wrapper for malformed JSON artifacts.
    #[error("malformed artifact: {0}")]
    Artifact(String),
}

impl Error {
    /// Short machine-readable kind for the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Precondition(_) => "precondition_violated",
            Error::NonFinite(_) => "non_finite",
            Error::GuardViolation { .. } => "guard_violation",
            Error::GuardUnrecoverable { .. } => "guard_unrecoverable",
            Error::FixedPointDiverged { .. } => "fixed_point_diverged",
            Error::QuadratureFailed { .. } => "quadrature_failed",
            Error::OutsideDomain { .. } => "outside_domain",
            Error::Io(_) => "io_error",
            Error::Artifact(_) => "artifact_invalid",
        }
    }
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
