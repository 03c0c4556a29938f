use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Error, Debug)]
pub enum Error {
    /// Invalid grid or domain geometry.
    #[error("grid error: {0}")]
    Grid(String),

    /// Expression parse or evaluation failure.
    #[error("expression error: {0}")]
    Expr(String),

    /// Field shape or evaluation failure.
    #[error("field error: {0}")]
    Field(String),

    /// An admissibility / hypothesis gate failed.
    #[error("gate failed: {0}")]
    Gate(String),

    /// Solver breakdown (NaN, divergence, iteration cap).
    #[error("solver error: {0}")]
    Solver(String),

    /// Configuration file problem.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
