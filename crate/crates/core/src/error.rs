use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite gradient in group `{group_id}`, tensor `{tensor_id}`")]
    NonFiniteGradient { group_id: String, tensor_id: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("step out of order: expected {expected}, got {got}")]
    StepOutOfOrder { expected: u64, got: u64 },

    #[error("invalid config `{field}`: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("expected gradients for group `{expected}`, got `{got}`")]
    GroupMismatch { expected: String, got: String },

    #[error("no clipping threshold for group `{0}`")]
    MissingGroupThreshold(String),

    #[error("parameter registry is empty")]
    EmptyRegistry,

    #[error("tensor `{0}` registered twice")]
    DuplicateTensor(String),

    #[error("tensor `{0}` is not in the registry")]
    UnknownTensor(String),

    #[error("tensor `{0}` has no gradient")]
    MissingGradient(String),

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("shape mismatch for `{what}`: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("backward called without a matching forward pass")]
    StaleForwardState,

    #[error("cannot summarize an empty record set")]
    EmptyInput,

    #[error("runs are not comparable: {0}")]
    WorkloadMismatch(String),

    #[error("I/O failure: {0}")]
    Io(#[from] io::Error),

    #[error("CSV failure: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON failure: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: 1 config, 2 numerical, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteGradient { .. } | Error::NonFiniteLoss { .. } => 2,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => 3,
            _ => 1,
        }
    }
}
