use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or batch dimensions disagree with the encoder.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Zero-norm vectors and similar inputs a formula cannot accept.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("adapter built for {adapter} cannot be imported into encoder {encoder}")]
    Portability { adapter: String, encoder: String },

    #[error("cannot compose {strategy}: missing artifact for stage `{stage}`")]
    MissingArtifact { strategy: String, stage: String },

    #[error("no negative pairs: the few-shot set has a single class")]
    NoNegatives,

    #[error("no positive pairs: every class has a single shot")]
    NoPositives,

    #[error("ingestion error in {}: {reason}", path.display())]
    Ingestion { path: PathBuf, reason: String },

    #[error("tensor archive: {0}")]
    Archive(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Errors caused by invalid inputs or configuration rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape(_)
                | Error::Degenerate(_)
                | Error::Config(_)
                | Error::Portability { .. }
                | Error::MissingArtifact { .. }
                | Error::NoNegatives
                | Error::NoPositives
                | Error::Ingestion { .. }
        )
    }
}

impl From<safetensors::SafeTensorError> for Error {
    fn from(e: safetensors::SafeTensorError) -> Self {
        Error::Archive(e.to_string())
    }
}
