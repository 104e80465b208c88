use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("singular transform: {0}")]
    Singular(String),

    #[error("registration failed at {stage}: {reason}")]
    Registration { stage: RegistrationStage, reason: String },

    #[error("numeric divergence at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Pipeline stage at which registration stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegistrationStage {
    Detection,
    Description,
    Matching,
    Ransac,
    Refinement,
    Warp,
}

impl std::fmt::Display for RegistrationStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RegistrationStage::Detection => "detection",
            RegistrationStage::Description => "description",
            RegistrationStage::Matching => "matching",
            RegistrationStage::Ransac => "ransac",
            RegistrationStage::Refinement => "refinement",
            RegistrationStage::Warp => "warp",
        };
        f.write_str(s)
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
