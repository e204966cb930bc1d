use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("singular parameter system: {0}")]
    Singular(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("hyperparameter optimization failed: {0}")]
    OptimFailed(String),

    #[error("non-finite value encountered: {0}")]
    NonFiniteEncountered(String),

    #[error("non-finite state at t = {time}: {detail}")]
    NonFiniteState { time: f64, detail: String },

    #[error("model parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}
