use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage an error originated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Simulate,
    Phase1,
    Phase2,
    Phase3,
    Eval,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Simulate => "simulate",
            Stage::Phase1 => "phase1",
            Stage::Phase2 => "phase2",
            Stage::Phase3 => "phase3",
            Stage::Eval => "eval",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown instance `{0}` (known: scalar-identity, di-cubic-lift, stable2x1-lift5)")]
    UnknownInstance(String),

    #[error("matrix is not stable: spectral radius {spectral_radius:.6} >= 1")]
    Unstable { spectral_radius: f64 },

    #[error("{what} did not converge within {iterations} iterations")]
    NotConverged { what: &'static str, iterations: usize },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("indefinite input: {0}")]
    Indefinite(String),

    #[error("not enough data for {context}: need {needed}, got {got}")]
    InsufficientData {
        context: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("singular system in {0}")]
    Singular(&'static str),

    #[error("degenerate spectrum: eigen-gap {gap:.3e} below 1e-12 (eigenvalues {eigenvalues:?})")]
    DegenerateSpectrum { gap: f64, eigenvalues: Vec<f64> },

    #[error("ill-conditioned covariance: sigma_min {sigma_min:.3e} below guard {guard:.3e}")]
    IllConditionedCovariance { sigma_min: f64, guard: f64 },

    #[error("burn-in kappa0 = {kappa0} exceeds cap {cap}")]
    InfeasibleBurnIn { kappa0: f64, cap: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{stage} failed{}: {source}", .t.map(|t| format!(" at t={t}")).unwrap_or_default())]
    Phase {
        stage: Stage,
        t: Option<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed file: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dims(context: &'static str, expected: impl fmt::Display, got: impl fmt::Display) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn at(self, stage: Stage, t: Option<usize>) -> Self {
        Error::Phase {
            stage,
            t,
            source: Box::new(self),
        }
    }

    /// The innermost error, unwrapping stage provenance.
    pub fn root(&self) -> &Error {
        match self {
            Error::Phase { source, .. } => source.root(),
            e => e,
        }
    }

    /// Configuration and precondition failures, detected before or without numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self.root(),
            Error::InvalidInput(_)
                | Error::UnknownInstance(_)
                | Error::DimensionMismatch { .. }
                | Error::Parse(_)
                | Error::InfeasibleBurnIn { .. }
        )
    }

    pub fn exit_code(&self) -> i32 {
        if self.is_validation() {
            2
        } else if matches!(self.root(), Error::Io(_)) {
            1
        } else {
            3
        }
    }
}
