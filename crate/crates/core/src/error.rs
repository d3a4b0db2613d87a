use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid box [{x0}, {y0}, {x1}, {y1}]: {reason}")]
    InvalidBox {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        reason: &'static str,
    },

    #[error("invalid task {task_id}: {reason}")]
    InvalidTask { task_id: String, reason: String },

    #[error("cannot serialize response: {0}")]
    Serialize(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite {what} at iteration {iteration} (task {task_id})")]
    NonFinite {
        what: &'static str,
        iteration: usize,
        task_id: String,
    },

    #[error("{0}")]
    Format(String),
}
