use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: {detail}")]
    Shape {
        op: &'static str,
        dim: &'static str,
        detail: String,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("batch of {0} is too small for {1}")]
    BatchTooSmall(usize, &'static str),

    #[error("class {class} has a single sample in the batch; attention needs a same-class partner")]
    SingletonClass { class: usize },

    #[error("style hooks are active but no style context was supplied")]
    MissingStyleContext,

    #[error("style hooks may attach to blocks 1-3 only, got block {0}")]
    InvalidHookBlock(usize),

    #[error("{clients} clients cannot be split evenly over {domains} source domains")]
    IndivisibleClients { clients: usize, domains: usize },

    #[error("parameter manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value detected: {0}")]
    Numeric(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, dim: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            dim,
            detail: detail.into(),
        }
    }
}
