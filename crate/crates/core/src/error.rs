use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm is numerically zero")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("effective margin {effective} is not below pi/2")]
    MarginOverflow { effective: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("tape does not match encoder parameters")]
    TapeMismatch,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("invalid synthetic spec: {0}")]
    SpecInvalid(String),
    #[error("could not place prototype for class {class} after {attempts} attempts")]
    PrototypePlacementFailed { class: usize, attempts: usize },
    #[error("class {class} has {count} samples, at least 2 required")]
    ClassTooSmall { class: usize, count: usize },
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("not enough samples: {0}")]
    NotEnoughSamples(String),
    #[error("unknown sample id {0:?}")]
    UnknownId(String),
    #[error("need at least one genuine and one impostor score")]
    OneSidedInput,
    #[error("fairness metrics need at least 2 non-empty groups, found {0}")]
    TooFewGroups(usize),
    #[error("unknown attribute {0:?}")]
    UnknownAttribute(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
