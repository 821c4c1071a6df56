use thiserror::Error;

/// Errors raised by the numerical modules and the experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("weight is singular on the boundary (|x| = {norm}, mu = {mu})")]
    BoundarySingularity { norm: f64, mu: f64 },

    #[error("degree block {block} is numerically dependent (residual ratio {ratio:.3e})")]
    Conditioning { block: usize, ratio: f64 },

    #[error("quadrature resolution insufficient: {0}")]
    Resolution(String),

    #[error("consistency check failed: {0}")]
    Consistency(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("{module}: {source}")]
    Context {
        module: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the error stems from bad input rather than a numerical failure.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::Config { .. } | Error::InvalidArgument(_) => true,
            Error::Context { source, .. } => source.is_usage(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
