use thiserror::Error;

/// Errors raised by the solvers and pipelines.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("indefinite weight: {0}")]
    IndefiniteWeight(String),
    #[error("pair is not stabilizable (no stabilizing Riccati solution)")]
    NonStabilizable,
    #[error("no convergence after {iterations} iterations (last residual {last_residual:.3e})")]
    NoConvergence { iterations: usize, last_residual: f64 },
    #[error("rank deficient data: effective rank {rank} < {required}")]
    RankDeficient { rank: usize, required: usize },
    #[error("identification infeasible at delta = {delta}: {constraint}")]
    Infeasible { delta: f64, constraint: String },
    #[error("identification solver stalled: {0}")]
    SolverStalled(String),
    #[error("cooperation-state pencil is singular: rank {rank} < {required}")]
    SingularPencil { rank: usize, required: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("channel {0} is identically zero")]
    ZeroSignalChannel(usize),
    #[error("x_max must be nonnegative")]
    NegativeXmax,
    #[error("no descent: optimizer did not improve on the initial point")]
    NoDescent,
    #[error("LISC requested without a designed controller")]
    MissingDesign,
    #[error("singular matrix: {0}")]
    Singular(String),
}

pub type Result<T> = std::result::Result<T, Error>;
