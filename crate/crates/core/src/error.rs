use thiserror::Error;

/// Errors surfaced by the model, engine, reference and analysis modules.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("unknown built-in problem `{0}`")]
    UnknownProblem(String),

    #[error("invalid option: {0}")]
    InvalidOption(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in term `{term}`{particle} at x = {position:?}")]
    NonFinite {
        term: String,
        /// Formatted as " for particle <m>" when a particle index is known.
        particle: String,
        position: Vec<f64>,
    },

    #[error("degenerate ensemble at step {step}: all resampling weights vanish")]
    DegenerateEnsemble { step: u64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("Riccati solver did not converge: {0}")]
    RiccatiNoConvergence(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
