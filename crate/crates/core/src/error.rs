use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("UE at distance {distance} m from a base station, below the minimum of {min} m")]
    DegenerateGeometry { distance: f64, min: f64 },

    #[error("singular model: {0}")]
    SingularModel(String),

    #[error("ill-conditioned matrix: {0}")]
    IllConditioned(String),

    #[error("{got} samples cannot resolve outage level {eps} (need at least {need})")]
    InsufficientSamples { got: usize, need: usize, eps: f64 },

    #[error("location {x} m outside map range [{lo}, {hi}] m")]
    OutOfMapRange { x: f64, lo: f64, hi: f64 },

    #[error("quantile level {eps} below empirical resolution 1/{n_samples}")]
    QuantileUnresolvable { eps: f64, n_samples: usize },

    #[error("selector is not monotone: outage region has {pieces} pieces, hull [{lo}, {hi}] m")]
    NonMonotoneSelector { pieces: usize, lo: f64, hi: f64 },

    #[error("calibration infeasible: {0}")]
    Infeasible(String),

    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("invalid value for `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(field: &str, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.to_owned(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation { .. } | Error::Parse(_) => 2,
            Error::Infeasible(_) => 3,
            Error::DegenerateGeometry { .. }
            | Error::SingularModel(_)
            | Error::IllConditioned(_)
            | Error::NonMonotoneSelector { .. }
            | Error::InvalidDomain(_)
            | Error::QuantileUnresolvable { .. }
            | Error::InsufficientSamples { .. }
            | Error::OutOfMapRange { .. } => 4,
            Error::Io(_) => 1,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
