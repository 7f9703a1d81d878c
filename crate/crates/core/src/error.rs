use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("outside model domain: {0}")]
    Domain(String),

    #[error("time step does not resolve the waveform: {0}")]
    Discretization(String),

    #[error("fit failed: {0}")]
    Fit(String),

    /// The solver ran out of iterations. `trace` holds the cost after each
    /// accepted or rejected iterate.
    #[error("no convergence after {iterations} iterations (residual norm {residual_norm:.6e})")]
    Convergence {
        iterations: usize,
        residual_norm: f64,
        trace: Vec<f64>,
    },

    #[error("degenerate blob: {0}")]
    DegenerateBlob(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("no switching current below threshold (best cost {best_cost:.4} at {best_current_ma:.5} mA)")]
    NotSwitchable { best_cost: f64, best_current_ma: f64 },

    #[error("waveform has zero encoding factor; gradient leaves no phase")]
    NoEncoding,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn ensure_finite(name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must be finite, got {value}")))
    }
}
