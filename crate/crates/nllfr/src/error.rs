//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is singular to working tolerance (smallest pivot {pivot:.3e})")]
    Singular { pivot: f64 },

    #[error("rank-deficient least-squares system (smallest scaled pivot {pivot:.3e})")]
    RankDeficient { pivot: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("parameter outside model domain: {0}")]
    ParameterDomain(String),

    #[error("(zeta_k I - A) is singular at frequency line {line}")]
    Resonance { line: usize },

    #[error("trajectory diverged (non-finite state) at {context}")]
    Instability { context: String },

    #[error("invalid excitation design: {0}")]
    Design(String),

    #[error("degenerate signal: {0}")]
    Degenerate(String),

    #[error("excited line {line} carries no input energy (|U(k)| below tolerance)")]
    Excitation { line: usize },

    #[error("window problem is ill-posed: lambda = 0 with n_w > n_y makes the Gram matrix rank-deficient")]
    IllPosed,

    #[error("unidentifiable regressor for monomial {monomial} at location {location}")]
    Identifiability { location: usize, monomial: String },

    #[error("non-finite cost at the initial parameter vector")]
    Initialization,

    #[error("finite-difference step failed: residuals non-finite after {retries} step reductions")]
    FdStep { retries: usize },

    #[error("steady state not reached: last two periods differ by {nrmse:.3}% NRMSE; increase settle periods")]
    Transient { nrmse: f64 },

    #[error("incompatible model/dataset: {0}")]
    Compatibility(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown spec or system name: {0}")]
    UnknownName(String),

    #[error("{stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("TOML parse error: {0}")]
    Toml(String),

    #[error("file format error in {path}: {detail}")]
    FileFormat { path: String, detail: String },
}

impl Error {
    /// Tags an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
