use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty tensor")]
    EmptyTensor,

    #[error("non-finite input in {0}")]
    NonFinite(&'static str),

    #[error("bitwidth {0} outside [2, 32]")]
    InvalidBitwidth(u8),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("gradient blow-up: non-finite gradient for layer {layer}")]
    GradientBlowUp { layer: usize },

    #[error("invalid policy config: {0}")]
    InvalidPolicy(String),

    #[error("invalid train config: {0}")]
    InvalidConfig(String),

    #[error("epsilon must be positive, got {0}")]
    NonPositiveEpsilon(f64),

    #[error("not an IDX file: {0}")]
    NotIdx(String),

    #[error("IDX parse error: {0}")]
    IdxParse(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, iteration {iter}")]
    Diverged { epoch: usize, iter: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
