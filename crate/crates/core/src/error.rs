use thiserror::Error;

/// Errors produced anywhere in the fitting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("row {row}: {message}")]
    MalformedRow { row: usize, message: String },

    #[error("subject `{0}` has no observations")]
    EmptySubject(String),

    #[error("invalid time range: t_min = {t_min}, t_max = {t_max}")]
    DegenerateTimeRange { t_min: f64, t_max: f64 },

    #[error("time value {value} outside [{t_min}, {t_max}]")]
    TimeOutOfRange { value: f64, t_min: f64, t_max: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(String),

    #[error("singular linear system ({0})")]
    Singular(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("failed to converge: {0}")]
    NoConvergence(String),

    #[error("group {0} received no subjects at initialization")]
    EmptyGroup(usize),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-readable tag used by the command-line error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::MissingColumn(_) => "missing_column",
            Error::MalformedRow { .. } => "malformed_row",
            Error::EmptySubject(_) => "empty_subject",
            Error::DegenerateTimeRange { .. } => "degenerate_time_range",
            Error::TimeOutOfRange { .. } => "time_out_of_range",
            Error::Dimension(_) => "dimension",
            Error::NotPositiveDefinite(_) => "not_positive_definite",
            Error::Singular(_) => "singular",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::NoConvergence(_) => "no_convergence",
            Error::EmptyGroup(_) => "empty_group",
            Error::Serialization(_) => "serialization",
        }
    }

    /// True for errors caused by the user's input rather than numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Csv(_)
                | Error::MissingColumn(_)
                | Error::MalformedRow { .. }
                | Error::EmptySubject(_)
                | Error::DegenerateTimeRange { .. }
                | Error::TimeOutOfRange { .. }
                | Error::InvalidParameter(_)
                | Error::Serialization(_)
        )
    }

    /// Data row (1-based, header excluded) the error refers to, if any.
    pub fn row(&self) -> Option<usize> {
        match self {
            Error::MalformedRow { row, .. } => Some(*row),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
