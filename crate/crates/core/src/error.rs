use thiserror::Error;

/// Error type shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A mask rectangle, crop or resize request does not fit the image it targets.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// A tensor or image was handed to an operation with incompatible dimensions.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid or inconsistent configuration (profiles, flags, counts, rates).
    #[error("config error: {0}")]
    Config(String),

    /// Parameters for the procedural renderer violate their invariants.
    #[error("validation error: {0}")]
    Validation(String),

    /// A metric was asked to score inputs it cannot handle.
    #[error("metric error: {0}")]
    Metric(String),

    /// A model produced an output that breaks its declared contract.
    #[error("model error: {0}")]
    Model(String),

    /// Training produced a non-finite loss; details were dumped to disk.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    /// A checkpoint file failed its integrity check.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A checkpoint was built for a different configuration; the diff lists the fields.
    #[error("checkpoint config mismatch:\n{0}")]
    ConfigMismatch(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
