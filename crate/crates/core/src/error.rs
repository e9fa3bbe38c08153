//! Shared error type for the core library.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("property envelope violated: p={p:.6e} Pa outside [{lo:.6e}, {hi:.6e}]")]
    Envelope { p: f64, lo: f64, hi: f64 },

    #[error("nonlinear solve failed: {0}")]
    Solve(String),

    #[error("integration failed at t={t:.6}: {reason}")]
    Integration { t: f64, reason: String },

    #[error("training failed: {0}")]
    Training(String),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
