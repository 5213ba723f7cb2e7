use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pipeline stage a backend failure is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Detect,
    Embed,
    Retrieve,
    Generate,
    Annotate,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Detect => "detect",
            Stage::Embed => "embed",
            Stage::Retrieve => "retrieve",
            Stage::Generate => "generate",
            Stage::Annotate => "annotate",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum RapError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("vector has zero norm")]
    ZeroVector,

    #[error("vector contains non-finite values")]
    NonFinite,

    #[error("concept name already in use: {0}")]
    DuplicateName(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),

    #[error("backend unavailable during {stage}: {message}")]
    BackendUnavailable { stage: Stage, message: String },

    #[error("malformed backend response during {stage}: {message}")]
    MalformedResponse { stage: Stage, message: String },

    #[error("cannot decode image: {0}")]
    DecodeError(String),

    #[error("index {index} out of range for {len} items")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("negative recognition requested for {0}, which is present in the sample")]
    PolarityContradiction(String),

    #[error("annotator unavailable: {0}")]
    AnnotatorUnavailable(String),

    #[error("noise concept {0} is referenced by the record target")]
    NoiseOverlapsTarget(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("query truth {0} is not in the built store")]
    UnknownTruth(String),
}

impl RapError {
    pub(crate) fn backend(stage: Stage, message: impl fmt::Display) -> Self {
        RapError::BackendUnavailable {
            stage,
            message: message.to_string(),
        }
    }

    pub(crate) fn malformed(stage: Stage, message: impl fmt::Display) -> Self {
        RapError::MalformedResponse {
            stage,
            message: message.to_string(),
        }
    }

    /// Stage tag for backend failures, if any.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            RapError::BackendUnavailable { stage, .. } | RapError::MalformedResponse { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

pub type Result<T, E = RapError> = std::result::Result<T, E>;
