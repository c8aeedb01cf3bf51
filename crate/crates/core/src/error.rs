use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("collocation order {0} outside supported range 1..={max}", max = crate::basis::MAX_ORDER)]
    UnsupportedOrder(usize),

    #[error("invalid collocation points: {0}")]
    InvalidPoints(String),

    #[error("singular interpolation system while building {0} basis")]
    SingularBasis(&'static str),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("Newton iteration did not converge (residual {residual:e} after {iterations} iterations)")]
    StepFailure { residual: f64, iterations: usize },

    #[error("simulation failed on interval {interval}: {source}")]
    Simulation {
        interval: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("time {t} outside trajectory horizon [0, {horizon}]")]
    OutOfHorizon { t: f64, horizon: f64 },

    #[error("non-finite value in {block} block (interval {interval:?})")]
    NonFinite {
        block: &'static str,
        interval: Option<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}
