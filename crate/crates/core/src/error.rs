use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Argument of a spectral transform lies inside the support of the density.
    #[error("argument {z} is not below the spectral lower edge {edge}")]
    Domain { z: f64, edge: f64 },

    /// The active density is at or beyond the measurement ratio.
    #[error("infeasible active density {rho_active} (measurement ratio {gamma})")]
    Infeasible { rho_active: f64, gamma: f64 },

    #[error("degenerate quantity: {0}")]
    Degenerate(String),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("numerical inconsistency: {0}")]
    Numeric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("replication {replication} (seed {seed}) failed: {message}")]
    Replication {
        replication: usize,
        seed: u64,
        message: String,
    },
}

impl Error {
    /// Short machine-readable tag, used in the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parameter(_) => "parameter",
            Error::Shape(_) => "shape",
            Error::Domain { .. } => "domain",
            Error::Infeasible { .. } => "infeasible",
            Error::Degenerate(_) => "degenerate",
            Error::NonConvergence { .. } => "non-convergence",
            Error::Numeric(_) => "numeric",
            Error::Io { .. } => "io",
            Error::Csv { .. } => "csv",
            Error::Json { .. } => "json",
            Error::Replication { .. } => "replication",
        }
    }
}

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Parameter(msg()))
    }
}
