use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown run '{0}'")]
    UnknownRun(String),

    #[error("run '{run}' has no checkpoint at step {step}")]
    UnknownCheckpoint { run: String, step: usize },

    #[error("run '{run}' has no checkpoints")]
    NoCheckpoints { run: String },

    #[error("checkpoint {step} of run '{run}' has not been analyzed")]
    NotAnalyzed { run: String, step: usize },

    #[error("{0}")]
    BadRequest(String),

    #[error(transparent)]
    Core(#[from] topklm::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    /// Stable machine-readable identifier for API clients.
    pub fn code(&self) -> &'static str {
        use topklm::Error as E;
        match self {
            Self::UnknownRun(_) => "unknown_run",
            Self::UnknownCheckpoint { .. } => "unknown_checkpoint",
            Self::NoCheckpoints { .. } => "no_checkpoints",
            Self::NotAnalyzed { .. } => "analysis_missing",
            Self::BadRequest(_) => "bad_request",
            Self::Core(E::Input(_) | E::Config(_) | E::Index { .. } | E::Length { .. }) => "bad_request",
            Self::Core(_) | Self::Io(_) => "internal",
        }
    }

    pub fn hint(&self) -> Option<String> {
        match self {
            Self::NotAnalyzed { run, step } => Some(format!(
                "POST /api/analyze with {{\"run\": \"{run}\", \"ckpt\": {step}}} or run `topklm analyze summary --run <dir>/{run} --ckpt {step}`"
            )),
            _ => None,
        }
    }

    pub fn bad_request(msg: impl Into<String>) -> Self {
        Self::BadRequest(msg.into())
    }
}
