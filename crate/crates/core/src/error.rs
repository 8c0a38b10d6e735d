use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("internal numerical error: {0}")]
    Numerical(String),

    #[error("torque limits infeasible: acceleration box shrank below {floor} after {iterations} rounds")]
    TorqueLimitsInfeasible { floor: f64, iterations: usize },

    #[error("synthesis infeasible at rho = {rho}: {reason}")]
    SynthesisInfeasible { rho: f64, reason: String },

    #[error("synthesized E is numerically singular at rho = {rho} (min eigenvalue {min_eig:e})")]
    IllConditioned { rho: f64, min_eig: f64 },

    #[error("no valid controller on the rho grid; reduce the uncertainty scale")]
    NoValidController,

    #[error("center not collision-free (scdf = {0})")]
    CenterInCollision(f64),

    #[error("planning failed: {0}")]
    PlanningFailed(String),

    #[error("corridor invalid: {0}")]
    CorridorInvalid(String),

    #[error("trajectory left corridor at step {index} (best margin {margin:e})")]
    TrajectoryLeftCorridor { index: usize, margin: f64 },

    #[error("solver error: {0}")]
    Solver(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} contains non-finite entries")))
    }
}
