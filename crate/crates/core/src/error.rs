use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum PhaseError {
    /// A configuration value violates its documented invariant.
    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// Input data is inconsistent with what an operation requires.
    #[error("data error: {0}")]
    Data(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    /// Training or inference produced a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("model file error: {0}")]
    Format(String),

    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("stale activation cache: cache built for parameter version {cache}, network is at {network}")]
    StaleCache { cache: u64, network: u64 },

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<PhaseError>,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Broad class of an error, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Data,
    Numeric,
}

impl PhaseError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        PhaseError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        PhaseError::Data(msg.into())
    }

    pub fn shape(
        context: impl Into<String>,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        PhaseError::Shape {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PhaseError::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with the name of the pipeline stage that raised it.
    pub fn at_stage(self, stage: impl Into<String>) -> Self {
        PhaseError::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            PhaseError::Numeric(_) => ErrorClass::Numeric,
            PhaseError::Stage { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, PhaseError>;

/// Attaches a stage name to the error of a `Result`.
pub trait StageExt<T> {
    fn stage(self, stage: &str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &str) -> Result<T> {
        self.map_err(|e| e.at_stage(stage))
    }
}
