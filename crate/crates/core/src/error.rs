use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("invalid {field}: {reason}")]
    InvalidArgument { field: &'static str, reason: String },
    #[error("class {class} has {available} examples but at least {required} are needed")]
    InsufficientClass {
        class: usize,
        available: usize,
        required: usize,
    },
    #[error("no personal parameters supplied for sampled client {0}")]
    MissingPersonal(usize),
    #[error("client {0} holds no mask")]
    MissingMask(usize),
    #[error("layer range {start}..{end} is invalid for {len} parameters")]
    InvalidRange { start: usize, end: usize, len: usize },
    #[error("malformed blob: {0}")]
    Blob(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            field,
            reason: reason.into(),
        }
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { what, expected, actual })
    }
}
