use num_complex::Complex64;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("resource limit: {0}")]
    ResourceLimit(String),

    #[error("conductivity evaluated outside its analyticity region at s = {s}, p = ({p0}, {p1})")]
    Domain {
        s: Complex64,
        p0: Complex64,
        p1: Complex64,
    },

    #[error("conductivity evaluator is disabled (boundary-data-only run)")]
    ModelDisabled,

    #[error("ellipticity lost: margin {margin:.3e} below floor {floor:.3e} at quadrature point {point} (x = ({x:.4}, {y:.4}))")]
    Ellipticity {
        point: usize,
        x: f64,
        y: f64,
        margin: f64,
        floor: f64,
    },

    #[error("linear solver failure: {0}")]
    Solver(String),

    #[error("Newton iteration did not converge after {iterations} iterations (last residual {last:.3e})", last = .history.last().copied().unwrap_or(f64::NAN))]
    NonConvergence { iterations: usize, history: Vec<f64> },

    #[error("probe is not transversal: |p . nu(0)| = {value:.3e} below cutoff {cutoff:.3e}")]
    Transversality { value: f64, cutoff: f64 },

    #[error("missing DN sample for {0}")]
    MissingSample(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
