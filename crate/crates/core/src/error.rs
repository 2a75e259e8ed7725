use psst_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("instance too large to enumerate: {0}")]
    Size(String),
    #[error("checkpoint load error: {0}")]
    Load(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("numerical abort: {0}")]
    NumericalAbort(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CoreError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors that mean training produced NaN/Inf.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            CoreError::NumericalAbort(_) | CoreError::Autodiff(AutodiffError::NonFinite { .. })
        )
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
