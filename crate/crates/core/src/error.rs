use thiserror::Error;

use crate::diffcore::GraphError;

#[derive(Debug, Error)]
pub enum CibError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{path}: row {row}, column `{column}`: {message}")]
    Parse {
        path: String,
        row: usize,
        column: String,
        message: String,
    },
    #[error("{0}")]
    Data(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("non-finite {term} at iteration {iter}")]
    NonFinite { term: String, iter: usize },
    #[error("{0}")]
    Metric(String),
    #[error("metric needs ground-truth column `{0}`, which the dataset does not have")]
    MissingColumn(String),
    #[error("propensity classifier is disabled in this model")]
    PropensityDisabled,
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CibError>;

impl CibError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CibError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

impl CibError {
    /// Short variant name, used in structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            CibError::Graph(_) => "graph",
            CibError::Config(_) => "config",
            CibError::Dimension(_) => "dimension",
            CibError::Parse { .. } => "parse",
            CibError::Data(_) => "data",
            CibError::Degenerate(_) => "degenerate",
            CibError::NonFinite { .. } => "nonFinite",
            CibError::Metric(_) => "metric",
            CibError::MissingColumn(_) => "missingColumn",
            CibError::PropensityDisabled => "propensityDisabled",
            CibError::Io { .. } => "io",
            CibError::Json(_) => "json",
            CibError::Csv(_) => "csv",
        }
    }
}
