use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A specification (synthetic data, pipeline, search space, experiment
    /// config) failed validation. The message names the offending field.
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    /// A dataset violated its schema or two schemas did not line up.
    #[error("schema error: {0}")]
    Schema(String),

    /// A missing cell was encountered where a complete value is required.
    #[error("missing value in column `{column}` at row {row}")]
    MissingValue { column: String, row: usize },

    /// A pipeline step could not be fitted or applied.
    #[error("pipeline error: {0}")]
    Pipeline(String),

    /// Tuning could not be carried out as requested.
    #[error("tuning error: {0}")]
    Tuning(String),

    /// The requested evaluation is not defined for this generation procedure.
    #[error("evaluation refused: {0}")]
    Refused(String),

    /// A data-provenance audit failed (content hash mismatch).
    #[error("audit failure: {0}")]
    Audit(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
