use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite objective")]
    NonFiniteObjective,

    #[error("non-finite values produced by {0}")]
    NonFinite(&'static str),

    #[error("fully masked attention row {0}")]
    FullyMaskedRow(usize),

    #[error("invalid block layout: {0}")]
    Layout(String),

    #[error("compression ratio {f} does not divide latent grid {h}x{w}")]
    Compression { f: usize, h: usize, w: usize },

    #[error("class id {class_id} out of range (n_classes = {n_classes})")]
    ClassOutOfRange { class_id: usize, n_classes: usize },

    #[error("{given} references exceed the maximum of {max}")]
    TooManyReferences { given: usize, max: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
