use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("ingestion error at row {row}, column {column}: {message}")]
    Ingestion {
        row: usize,
        column: String,
        message: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("estimand undefined: {0}")]
    EstimandUndefined(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("estimation failed for unit {unit}, level {level}: {message}")]
    Estimation {
        unit: usize,
        level: usize,
        message: String,
    },

    #[error("numerical failure ({context}): {message}")]
    Numerical { context: String, message: String },

    #[error("tuning error: {0}")]
    Tuning(String),

    #[error("high-rank covariates degenerate: {0}")]
    HighRankDegenerate(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn numerical(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Numerical {
            context: context.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by the input data or the requested estimands.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Schema(_)
                | Error::Ingestion { .. }
                | Error::Domain(_)
                | Error::Size(_)
                | Error::MetricUndefined(_)
                | Error::EstimandUndefined(_)
                | Error::Contract(_)
                | Error::Csv(_)
        )
    }

    /// True for failures of an estimation routine on otherwise valid data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical { .. }
                | Error::Estimation { .. }
                | Error::Tuning(_)
                | Error::HighRankDegenerate(_)
        )
    }
}
