use nowcast_tensor::TensorError;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{what}: {reason}")]
    Invalid { what: &'static str, reason: String },
    #[error("malformed {what} at byte {pos}: {reason}")]
    Format { what: &'static str, pos: usize, reason: String },
    #[error("missing {variable} frame valid at t={time} min")]
    MissingFrame { variable: String, time: i64 },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("cannot access {path}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        CoreError::Invalid {
            what,
            reason: reason.into(),
        }
    }

    pub(crate) fn format(what: &'static str, pos: usize, reason: impl Into<String>) -> Self {
        CoreError::Format {
            what,
            pos,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
