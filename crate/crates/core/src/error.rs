use thiserror::Error;

/// Errors raised by grid, low-rank and integrator operations.
#[derive(Debug, Error)]
pub enum KinlrError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("charge density is not neutral: mean {mean:e} exceeds tolerance {tol:e}")]
    Solvability { mean: f64, tol: f64 },

    #[error("empty factored sum")]
    EmptyInput,

    #[error("dense size cap exceeded: {entries} entries > cap {cap}")]
    Resource { entries: usize, cap: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("step size {dt:e} violates the CFL bound {bound:e}")]
    StepSize { dt: f64, bound: f64 },

    #[error("failed at step {step}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<KinlrError>,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, KinlrError>;
