use thiserror::Error;

/// Errors raised anywhere in the adaptation stack.
#[derive(Debug, Error)]
pub enum OndaError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("batch is empty")]
    EmptyBatch,

    #[error("class {class} has no pixels in the source set")]
    MissingClass { class: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Failures specific to the `ONDA1` checkpoint container.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("file truncated")]
    Truncated,
    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("architecture mismatch: {0}")]
    Incompatible(String),
    #[error("malformed header: {0}")]
    Header(String),
}

pub type Result<T, E = OndaError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> OndaError {
    OndaError::Shape {
        op,
        detail: detail.into(),
    }
}
