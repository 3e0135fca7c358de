use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] draftlab_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// Whether the error stems from the request rather than from running it.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            HarnessError::Config(_)
                | HarnessError::Json(_)
                | HarnessError::Core(
                    draftlab_core::Error::Config(_)
                        | draftlab_core::Error::InvalidArgument(_)
                        | draftlab_core::Error::InvalidVocabulary(_)
                        | draftlab_core::Error::InvalidOrder(_)
                        | draftlab_core::Error::TableTooLarge(_)
                )
        )
    }
}
