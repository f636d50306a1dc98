use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A model or control violates one of its structural constraints.
    #[error("{0}")]
    Constraint(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("rate matrix is reducible; communicating classes (0-based) {classes:?}")]
    Reducible { classes: Vec<Vec<usize>> },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("thinning control {value} on channel {from}->{to} at t={time} exceeds declared maximum {max}")]
    ControlBound {
        from: usize,
        to: usize,
        time: f64,
        value: f64,
        max: f64,
    },

    #[error("trajectory {index}: {source}")]
    Trajectory {
        index: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by user input (configs, shapes, arguments) as
    /// opposed to numerical trouble during a run.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::Shape(_)
            | Error::Constraint(_)
            | Error::InvalidArgument(_)
            | Error::Config(_)
            | Error::Json(_)
            | Error::Csv(_)
            | Error::Io(_) => true,
            Error::Trajectory { source, .. } => source.is_user_error(),
            _ => false,
        }
    }
}
