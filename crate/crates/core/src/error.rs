use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },
    #[error("ingestion error: {0}")]
    Ingest(String),
    #[error("missing mask for image `{name}` (expected {path})")]
    MissingMask { name: String, path: PathBuf },
    #[error("synthetic generation failed: {0}")]
    Generation(String),
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("missing dependency: {0}")]
    Dependency(String),
    #[error("invalid statistics input: {0}")]
    Stats(String),
    #[error(transparent)]
    Nn(#[from] endouda_nn::NnError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
