use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("invalid rubric: {0}")]
    InvalidRubric(String),
    #[error("invalid response {id}: {reason}")]
    InvalidResponse { id: String, reason: String },
    #[error("duplicate id: {0}")]
    DuplicateId(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("label lists differ in length ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("metric needs at least one pair")]
    Empty,
    #[error("label {label} outside [{min}, {max}]")]
    LabelOutOfRange { label: u32, min: u32, max: u32 },
    #[error("invalid label range [{min}, {max}]")]
    InvalidRange { min: u32, max: u32 },
    #[error("label {0} is not binary")]
    NonBinary(u32),
    #[error("kappa {0} outside [-1, 1]")]
    KappaOutOfRange(f64),
    #[error("prediction and gold ids differ: {0}")]
    IdMismatch(String),
}
