use std::path::PathBuf;

use csicount_nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("ingestion failed for sample `{sample_id}`: {message}")]
    Ingestion { sample_id: String, message: String },
    #[error("unknown activity `{0}`")]
    UnknownActivity(String),
    #[error("duplicate sample_id `{0}`")]
    DuplicateSample(String),
    #[error("malformed dataset table {path}: {message}")]
    Table { path: PathBuf, message: String },
    #[error("sample `{sample_id}`: expected shape {expected}, got {actual:?}")]
    Shape {
        sample_id: String,
        expected: String,
        actual: Vec<usize>,
    },
    #[error("sample `{sample_id}`: {count} non-finite values")]
    NonFinite { sample_id: String, count: usize },
    #[error("sample `{sample_id}`: {count} negative amplitude values")]
    NegativeAmplitude { sample_id: String, count: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step} (epoch {epoch}): loss {loss}")]
    NonFiniteLoss { step: usize, epoch: usize, loss: f64 },
    #[error("checkpoint {path} was written for fingerprint {found}, expected {expected}")]
    Fingerprint {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
