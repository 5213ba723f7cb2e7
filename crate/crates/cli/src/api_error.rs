use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use rap_core::{RapError, Stage};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    DuplicateName,
    NotFound,
    DimensionMismatch,
    BackendUnavailable,
    CorruptManifest,
    ValidationFailed,
}

/// Error body of every failed request and of the CLI's stderr.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            stage: None,
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::ValidationFailed, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::NotFound, message)
    }

    pub fn status(&self) -> StatusCode {
        match self.code {
            ErrorCode::DuplicateName => StatusCode::CONFLICT,
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::DimensionMismatch => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorCode::BackendUnavailable => StatusCode::BAD_GATEWAY,
            ErrorCode::CorruptManifest => StatusCode::INTERNAL_SERVER_ERROR,
            ErrorCode::ValidationFailed => StatusCode::BAD_REQUEST,
        }
    }
}

impl From<RapError> for ApiError {
    fn from(e: RapError) -> Self {
        let code = match &e {
            RapError::DuplicateName(_) => ErrorCode::DuplicateName,
            RapError::NotFound(_) => ErrorCode::NotFound,
            RapError::DimensionMismatch { .. } => ErrorCode::DimensionMismatch,
            RapError::BackendUnavailable { .. }
            | RapError::MalformedResponse { .. }
            | RapError::AnnotatorUnavailable(_)
            | RapError::Io(_) => ErrorCode::BackendUnavailable,
            RapError::CorruptManifest(_) => ErrorCode::CorruptManifest,
            _ => ErrorCode::ValidationFailed,
        };
        Self {
            code,
            message: e.to_string(),
            stage: e.stage(),
        }
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}: {}", self.code, self.message)
    }
}

impl std::error::Error for ApiError {}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self)).into_response()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_and_statuses() {
        let e = ApiError::from(RapError::DuplicateName("⟨a⟩".into()));
        assert_eq!((e.code, e.status()), (ErrorCode::DuplicateName, StatusCode::CONFLICT));
        let e = ApiError::from(RapError::BackendUnavailable {
            stage: Stage::Generate,
            message: "down".into(),
        });
        assert_eq!(e.stage, Some(Stage::Generate));
        assert_eq!(
            serde_json::to_value(&e).unwrap(),
            serde_json::json!({"code": "backend_unavailable", "message": e.message, "stage": "generate"})
        );
        let e = ApiError::from(RapError::ZeroVector);
        assert_eq!(e.code, ErrorCode::ValidationFailed);
        assert!(serde_json::to_value(&e).unwrap().get("stage").is_none());
    }
}
