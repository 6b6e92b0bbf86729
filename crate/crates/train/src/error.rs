use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Core(#[from] curvature_core::Error),

    #[error("epoch {epoch}, iteration {iteration}: {source}")]
    Numeric {
        epoch: usize,
        iteration: u64,
        #[source]
        source: curvature_core::Error,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl TrainError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Numerical failures, as opposed to bad input or IO.
    pub fn is_numeric(&self) -> bool {
        match self {
            Self::Numeric { .. } => true,
            Self::Core(e) => matches!(
                e,
                curvature_core::Error::NonFinite { .. }
                    | curvature_core::Error::VanishingCurvature
                    | curvature_core::Error::DegenerateStatistics { .. }
                    | curvature_core::Error::ZeroDirection
            ),
            _ => false,
        }
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;
