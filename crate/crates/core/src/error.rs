use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("non-finite value in {context}")]
    Numeric { context: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Diff(#[from] mfax_autodiff::DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for CoreError {
    fn from(e: serde_json::Error) -> Self {
        CoreError::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn numeric(context: impl Into<String>) -> CoreError {
    CoreError::Numeric {
        context: context.into(),
    }
}
