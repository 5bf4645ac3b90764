use thiserror::Error;

/// Errors produced by basis construction, fitting and credible-set routines.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("point outside [0,1]^d{}: coordinate {value}", index.map(|i| format!(" at row {i}")).unwrap_or_default())]
    Domain { index: Option<usize>, value: f64 },

    #[error("dimension mismatch: expected {expected}, got {found}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("derivative order {r} not supported for spline order {q} (need r < q)")]
    UnsupportedOrder { r: usize, q: usize },

    #[error("basis size {j} exceeds sample size {n}")]
    OverParameterized { j: usize, n: usize },

    #[error("Cholesky factorization failed: non-positive pivot at index {pivot}")]
    Factorization { pivot: usize },

    #[error("operation requires {expected:?} noise mode, fit used {found:?}")]
    WrongNoiseMode { expected: String, found: String },

    #[error("quantile needs at least {needed} Monte Carlo samples at this level, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("evaluation grids do not match")]
    GridMismatch,

    #[error("CSV error at line {line}: {msg}")]
    Csv { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
