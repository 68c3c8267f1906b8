use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point {coords:?} lies outside the chart domain")]
    Domain { coords: Vec<f64> },

    #[error("curve left the chart domain at t = {time}")]
    DomainExit { time: f64 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("degenerate plane: tangent vectors are (nearly) parallel")]
    DegeneratePlane,

    #[error("log map did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("enumeration budget exceeded: {count} controls, budget {budget}")]
    Budget { count: u128, budget: u128 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid JSON at line {line}, column {column}: {message}")]
    Json {
        line: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
