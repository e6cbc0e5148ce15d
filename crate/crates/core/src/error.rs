use std::path::PathBuf;

/// Errors produced by the evaluation and dataset pipelines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("RLE counts sum to {actual}, expected {expected} (width*height)")]
    SumMismatch { expected: u64, actual: u64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("reference database is empty")]
    EmptyDatabase,

    #[error("vector cannot be normalized: {0}")]
    NonFiniteVector(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("service `{service}` unavailable: {message}")]
    ClientUnavailable { service: String, message: String },

    #[error("no fixture for {endpoint} request (key {key})")]
    FixtureMissing { endpoint: String, key: String },

    #[error("schema error in {context}: {message}")]
    SchemaError { context: String, message: String },

    #[error("image `{0}` not found")]
    ImageUnavailable(String),

    #[error("catalog is empty")]
    EmptyCatalog,

    #[error("batch is empty")]
    EmptyBatch,

    #[error("no candidates to choose from")]
    EmptyCandidates,

    #[error("input is empty")]
    EmptyInput,

    #[error("need at least two seeds, got {0}")]
    TooFewSeeds(usize),

    #[error("training diverged at step {step}: loss = {loss}")]
    DivergenceDetected { step: usize, loss: f64 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(context: impl Into<String>, message: impl std::fmt::Display) -> Self {
        Error::SchemaError {
            context: context.into(),
            message: message.to_string(),
        }
    }
}

/// Deserialize `value` into `T`, reporting the JSON path of the offending field on failure.
pub(crate) fn from_value_at<T: serde::de::DeserializeOwned>(
    context: &str,
    value: serde_json::Value,
) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::schema(context, format!("field `{}`: {}", path, e.into_inner()))
    })
}

/// Same as [`from_value_at`] but from raw text.
pub(crate) fn from_str_at<T: serde::de::DeserializeOwned>(context: &str, text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::schema(context, format!("field `{}`: {}", path, e.into_inner()))
    })
}
