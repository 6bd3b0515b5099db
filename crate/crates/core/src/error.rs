use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point is behind the camera (depth {depth:.3e} m)")]
    BehindCamera { depth: f64 },

    #[error("degenerate line: endpoints coincide")]
    DegenerateLine,

    #[error("loss evaluated to a non-finite value")]
    NonFinite,

    #[error("class {class} has {available} examples, need at least {required}")]
    InsufficientData {
        class: usize,
        available: usize,
        required: usize,
    },

    #[error("no ground truth for class {class}")]
    NoGroundTruth { class: usize },

    #[error("rejection sampling overflow after {attempts} attempts")]
    RejectionOverflow { attempts: usize },

    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
