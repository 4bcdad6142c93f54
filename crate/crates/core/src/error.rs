use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: dimension `{dim}` expected {expected}, got {got}")]
    Dim {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite values produced by layer `{layer}`")]
    NonFinite { layer: String },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("missing input `{0}`")]
    MissingInput(String),

    #[error("dtype mismatch: expected {expected}, found {found}")]
    Dtype {
        expected: &'static str,
        found: String,
    },

    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True for errors caused by bad user input rather than by the program.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::NonFinite { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
