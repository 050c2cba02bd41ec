use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("domain error in {function}: {detail}")]
    Domain {
        function: &'static str,
        detail: String,
    },

    #[error("{routine} did not converge within {iterations} iterations")]
    NonConvergence {
        routine: &'static str,
        iterations: usize,
    },

    #[error("invalid study {id}: {reason}")]
    InvalidStudy { id: String, reason: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("design matrix is rank deficient (rank {rank} < {columns} columns)")]
    RankDeficient { rank: usize, columns: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error at row {row}: {reason}")]
    Parse { row: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MetaError>;

pub(crate) fn domain(function: &'static str, detail: impl Into<String>) -> MetaError {
    MetaError::Domain {
        function,
        detail: detail.into(),
    }
}
