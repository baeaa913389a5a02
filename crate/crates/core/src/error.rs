use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },
    #[error("matrix function undefined on spectrum: {0}")]
    Domain(String),
    #[error("rank deficient matrix: |R[{index},{index}]| = {value:e}")]
    RankDeficient { index: usize, value: f64 },
    #[error("graph error: {0}")]
    Graph(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("lesion placement failed: {0}")]
    Placement(String),
    #[error("invalid metric input: {0}")]
    Metric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
