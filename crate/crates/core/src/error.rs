use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("row {row} has no finite logit")]
    DegenerateRow { row: usize },

    #[error("{what} did not converge after {iterations} iterations")]
    Numerical { what: &'static str, iterations: usize },

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("calibration diverged at epoch {epoch}")]
    CalibrationDiverged { epoch: usize, trace: Vec<f64> },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures of the numerical machinery, as opposed to bad
    /// configuration or malformed inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical { .. }
                | Error::DegenerateRow { .. }
                | Error::MetricUndefined(_)
                | Error::CalibrationDiverged { .. }
        )
    }
}
