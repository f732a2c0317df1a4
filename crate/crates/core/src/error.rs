use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The requested operation needs a negative drift.
    #[error("unsupported regime: {0}")]
    Regime(String),

    #[error("series start x0 = {x0:e} too large: next-term ratio {ratio:e} exceeds {limit:e}")]
    CutoffTooLarge { x0: f64, ratio: f64, limit: f64 },

    #[error("g' = {g_prime} left [0, 1] at x = {x:e}")]
    MonotonicityViolation { x: f64, g_prime: f64 },

    #[error("non-finite state at x = {x:e}")]
    NumericalBlowup { x: f64 },

    #[error("shooting failed: {0}")]
    ShootingFailed(String),

    #[error("policy emitted positive rate {rate} at t = {t}")]
    Admissibility { t: f64, rate: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("time step too large for stability: nt = {nt}, need at least {required}")]
    Cfl { nt: usize, required: usize },

    #[error("scheme failure: {0}")]
    SchemeFailure(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
