use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("{what} conflict at row {row}, col {col}")]
    Conflict { what: &'static str, row: usize, col: usize },
    #[error("color map payload at byte {offset}: {reason}")]
    ColorMapFormat { offset: usize, reason: String },
    #[error("target-domain masks may only be read for evaluation ({0})")]
    TargetMaskForbidden(String),
    #[error("png {path}: {reason}")]
    Png { path: String, reason: String },
    #[error("missing prerequisite artifact {}", .0.display())]
    MissingArtifact(std::path::PathBuf),
    #[error("unknown adaptation method {0:?}")]
    UnknownMethod(String),
    #[error(transparent)]
    Nn(#[from] cmgan_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CoreError::Invalid(msg.into())
    }

    /// True for errors caused by bad input rather than a fault of the program.
    pub fn is_user_error(&self) -> bool {
        match self {
            CoreError::Conflict { .. } => false,
            CoreError::Nn(e) => matches!(e, cmgan_nn::NnError::Checkpoint(_) | cmgan_nn::NnError::Io(_)),
            _ => true,
        }
    }
}
