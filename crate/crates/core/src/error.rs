use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("label vocabulary is empty")]
    EmptyVocabulary,

    #[error("invalid label name {0:?}: names must be unique and non-empty")]
    InvalidLabelName(String),

    #[error("label index {index} out of range for {k} classes")]
    LabelOutOfRange { index: usize, k: usize },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate instance id {0:?}")]
    DuplicateId(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("{what}: expected length {expected}, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{what}: {left} = {left_value} does not match {right} = {right_value}")]
    DimensionMismatch {
        what: &'static str,
        left: &'static str,
        left_value: usize,
        right: &'static str,
        right_value: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid soft label {value} at class {class}: must lie in [0, 1]")]
    InvalidSoftLabel { class: usize, value: f64 },

    #[error("exhaustive enumeration over {k} classes exceeds the cap of {cap}")]
    TooManyClasses { k: usize, cap: usize },

    #[error("degenerate sample: {0}")]
    Degenerate(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence {
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("no embedding for prompt {0:?}")]
    MissingEmbedding(String),

    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },

    #[error("invalid metric input: {0}")]
    Metric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyVocabulary => "empty_vocabulary",
            Error::InvalidLabelName(_) => "invalid_label_name",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::Parse { .. } => "parse",
            Error::DuplicateId(_) => "duplicate_id",
            Error::EmptyDataset => "empty_dataset",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidConfig(_) => "invalid_config",
            Error::InvalidSoftLabel { .. } => "invalid_soft_label",
            Error::TooManyClasses { .. } => "too_many_classes",
            Error::Degenerate(_) => "degenerate",
            Error::Divergence { .. } => "divergence",
            Error::MissingEmbedding(_) => "missing_embedding",
            Error::Format { .. } => "format",
            Error::Metric(_) => "metric",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            what,
            message: message.into(),
        }
    }
}

pub(crate) fn ensure_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::LengthMismatch {
            what,
            expected,
            found,
        })
    }
}

pub(crate) fn ensure_finite(what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
