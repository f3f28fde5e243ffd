//! Crate-wide error and result types.

use thiserror::Error;

/// A single contract violation found while checking a config or a plan.
///
/// Violations are data, not failures: validation routines collect every
/// problem they can find and return the whole list.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Violation {
    /// Field or directive the violation refers to, e.g. `transformer_depths`.
    pub subject: String,
    pub message: String,
}

impl Violation {
    pub fn new(subject: impl Into<String>, message: impl Into<String>) -> Self {
        Self { subject: subject.into(), message: message.into() }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.subject, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {}", format_violations(.0))]
    InvalidConfig(Vec<Violation>),

    #[error("invalid plan: {}", format_violations(.0))]
    InvalidPlan(Vec<Violation>),

    #[error("shape mismatch for {input}: expected {expected}, got {got}")]
    ShapeMismatch { input: String, expected: String, got: String },

    #[error("{what} out of range: {value} not in [{lo}, {hi})")]
    OutOfRange { what: String, value: i64, lo: i64, hi: i64 },

    #[error("requested fraction {requested} exceeds removable mass; at most {achievable:.4} of parameters can be removed")]
    Capacity { requested: f64, achievable: f64 },

    #[error("non-finite loss at step {step} (lr {lr}): {detail}")]
    NanAbort { step: usize, lr: f64, detail: String },

    #[error("unknown token id {0}")]
    UnknownToken(u32),

    #[error("feature shape mismatch at tap {key}: teacher {teacher}, student {student}")]
    TapShapeMismatch { key: String, teacher: String, student: String },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("missing baseline {0} in comparison set")]
    MissingBaseline(String),

    #[error("malformed archive: {0}")]
    MalformedArchive(String),

    #[error("{0}")]
    Msg(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image encode failed: {0}")]
    Image(String),
}

impl Error {
    /// True for errors caused by bad user input (configs, plans, flags),
    /// as opposed to failures at run time. The CLI maps these to exit 1.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::InvalidPlan(_)
                | Error::ShapeMismatch { .. }
                | Error::OutOfRange { .. }
                | Error::Capacity { .. }
                | Error::UnknownToken(_)
                | Error::MissingBaseline(_)
        )
    }
}

fn format_violations(violations: &[Violation]) -> String {
    violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

pub type Result<T> = std::result::Result<T, Error>;
